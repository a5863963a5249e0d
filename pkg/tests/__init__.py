"""
Test suite for AI Ace Attorney Game Development Project
"""