import os
import sys

# make sibling test helpers (fdcheck.py) importable regardless of invocation dir
sys.path.insert(0, os.path.dirname(__file__))
