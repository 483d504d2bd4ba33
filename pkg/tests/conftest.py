"""
Shared test setup: run against the testing configuration
"""

import os
import sys

os.environ.setdefault('LOCC_ENV', 'testing')
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
