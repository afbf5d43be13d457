"""
Test suite for flow-drl

Copyright (c) 2026 flow-drl authors
"""
