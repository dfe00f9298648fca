#!/usr/bin/env python
import sys

from pysprpose.main import main

"""
Command line entry point, installed through setup.py scripts.

  spr_pose.py encode --dataset data.json --out maps/
  spr_pose.py decode --maps maps/ --out pred.json
  spr_pose.py eval --pred pred.json --gt data.json

Run spr_pose.py --help for the full command list.
"""

if __name__ == "__main__":
    sys.exit(main())
