"""Dataset ingestion, task construction and task-order shuffling"""
