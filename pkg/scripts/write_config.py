#!/usr/bin/env python3
import os
import sys
import json
import argparse
import logging

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from utils.config import TEMPLATE_NAMES, default_config, parse_config  # noqa: E402

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def write_config(name, path):
    """Write a validated template config to path"""
    try:
        data = default_config(name)
        parse_config(data)
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write('\n')
        logger.info(f"Wrote {name} config to {path}")
        return True
    except Exception as e:
        logger.error(f"Error writing config: {str(e)}")
        return False


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Write a template experiment config")
    parser.add_argument("template", choices=TEMPLATE_NAMES, help="Template name")
    parser.add_argument("path", help="Destination JSON file")
    args = parser.parse_args()

    if write_config(args.template, args.path):
        print(f"Successfully wrote {args.template} config to {args.path}")
    else:
        print("Failed to write config")
        exit(1)
