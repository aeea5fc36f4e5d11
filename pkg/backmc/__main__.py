#!/usr/bin/env python3
"""
backmc CLI - Main entry point for python -m backmc
"""
from backmc.cli import main

if __name__ == '__main__':
    main()
