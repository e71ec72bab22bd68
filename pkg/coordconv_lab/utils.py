"""
Utility functions for coordconv-lab

This module provides common utility functions used across the package,
including configuration loading, logging setup, signal handling, content
hashing and PGM raster export.

Functions:
    load_config: Load configuration from JSON file
    section: Read one configuration section with defaults applied
    setup_logging: Set up logging based on configuration
    graceful_shutdown: Handle graceful shutdown signals
    setup_signal_handlers: Set up signal handlers for graceful shutdown
    get_current_timestamp: Get current timestamp in ISO format
    format_error_message: Format error message for logging/reports
    validate_config: Validate configuration structure
    create_data_directory: Create the parent directory of a path
    git_blob_hash: Git-style content hash of a byte string
    write_pgm / read_pgm: Binary (P5) graymap export and import

Example:
    config = load_config('config.json')
    logger = setup_logging(config)
"""

import hashlib
import json
import logging
import logging.handlers
import os
import signal
from datetime import datetime
from typing import Any, Dict, Optional

import numpy as np

KNOWN_SECTIONS = ('train', 'sweep', 'report', 'logging', 'output_dir')


def load_config(config_path: Optional[str]) -> Dict[str, Any]:
    """Load configuration from JSON file; no path means built-in defaults"""
    if config_path is None:
        return {}
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            config = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"Configuration file not found: {config_path}")
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid JSON in configuration file: {str(e)}")
    if not validate_config(config):
        raise ValueError(f"Unknown configuration sections in {config_path}: "
                         f"{sorted(set(config) - set(KNOWN_SECTIONS))}")
    return config


def section(config: Dict[str, Any], name: str, **defaults) -> Dict[str, Any]:
    """Return config[name] layered over defaults"""
    merged = dict(defaults)
    merged.update(config.get(name, {}) or {})
    return merged


def setup_logging(config: Dict[str, Any]) -> logging.Logger:
    """Set up logging based on configuration"""
    log_config = config.get('logging', {})
    level = getattr(logging, str(log_config.get('level', 'INFO')).upper())
    handlers = [logging.StreamHandler()]

    log_file = log_config.get('file')
    if log_file:
        create_data_directory(log_file)
        handlers.append(logging.handlers.RotatingFileHandler(
            log_file,
            maxBytes=log_config.get('max_bytes', 5 * 1024 * 1024),
            backupCount=log_config.get('backup_count', 3),
        ))

    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )

    return logging.getLogger('coordconv_lab')


def graceful_shutdown(signum, frame):
    """Turn SIGINT/SIGTERM into KeyboardInterrupt so the caller can report an interrupted run"""
    logging.getLogger('coordconv_lab').warning(f"Received signal {signum}, shutting down")
    raise KeyboardInterrupt(f"signal {signum}")


def setup_signal_handlers():
    """Set up signal handlers for graceful shutdown"""
    signal.signal(signal.SIGINT, graceful_shutdown)
    signal.signal(signal.SIGTERM, graceful_shutdown)


def get_current_timestamp() -> str:
    """Get current timestamp in ISO format"""
    return datetime.now().isoformat()


def format_error_message(error: Exception) -> str:
    """Format error message for logging/reports"""
    return f"{type(error).__name__}: {str(error)}"


def validate_config(config: Dict[str, Any]) -> bool:
    """Validate configuration structure"""
    if not isinstance(config, dict):
        return False
    return all(key in KNOWN_SECTIONS for key in config)


def create_data_directory(path: str) -> bool:
    """Create the parent directory of path if it doesn't exist"""
    parent = os.path.dirname(path)
    if not parent:
        return True
    os.makedirs(parent, exist_ok=True)
    return True


def git_blob_hash(content: bytes) -> str:
    """SHA-1 over 'blob <len>\\0' + content, as `git hash-object` computes it"""
    digest = hashlib.sha1()
    digest.update(f"blob {len(content)}\0".encode('ascii'))
    digest.update(content)
    return digest.hexdigest()


def to_gray_bytes(values: np.ndarray) -> np.ndarray:
    """Map values in [0,1] to uint8 gray levels"""
    clipped = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.rint(clipped * 255.0).astype(np.uint8)


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0,1]; a constant map becomes all zeros"""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def write_pgm(path: str, values: np.ndarray, scale: int = 1):
    """Write a 2-D map in [0,1] as a binary PGM (P5), optionally upscaled"""
    gray = to_gray_bytes(values)
    if gray.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D map, got shape {gray.shape}")
    if scale > 1:
        gray = np.kron(gray, np.ones((scale, scale), dtype=np.uint8))
    create_data_directory(path)
    height, width = gray.shape
    with open(path, 'wb') as f:
        f.write(f"P5\n{width} {height}\n255\n".encode('ascii'))
        f.write(gray.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Read a binary PGM (P5) written by write_pgm"""
    with open(path, 'rb') as f:
        content = f.read()
    # header is exactly three newline-terminated lines; pixel bytes may be whitespace
    fields = content.split(b'\n', 3)
    if len(fields) != 4 or fields[0] != b'P5':
        raise ValueError(f"Not a binary PGM file: {path}")
    width, height = (int(v) for v in fields[1].split())
    maxval = int(fields[2])
    if maxval != 255:
        raise ValueError(f"Unsupported PGM maxval {maxval} in {path}")
    pixels = np.frombuffer(fields[3], dtype=np.uint8, count=width * height)
    return pixels.reshape(height, width)
