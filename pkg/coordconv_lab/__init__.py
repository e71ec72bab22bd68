"""
coordconv-lab: a numpy CoordConv engine and the Not-so-Clevr experiment harness
"""

__version__ = '0.1.0'
