"""Service and simulation settings loaded from the environment"""
