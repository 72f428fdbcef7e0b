"""jobpower services package"""
