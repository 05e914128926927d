"""Sequential training with the importance-weighted anchor penalty"""
