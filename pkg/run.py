#!/usr/bin/env python3
# Copyright 2016-2020 Christoph Reiter
# SPDX-License-Identifier: MIT

import sys

from svgsim.cli import main


if __name__ == "__main__":
    sys.exit(main(sys.argv))
