#!/usr/bin/env python3
from fmprune_adapter.finetune import main

if __name__ == "__main__":
    raise SystemExit(main())
