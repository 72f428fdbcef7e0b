"""jobpower utilities package"""
