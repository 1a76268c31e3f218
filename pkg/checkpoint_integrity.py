"""
Checkpoint Integrity Layer using HMAC-SHA256
============================================
Every checkpoint file carries a 32-byte HMAC-SHA256 trailer over its
contents, so an evaluation run never silently loads parameters that were
truncated or edited after training.

Usage:
    - Before writing: attach_integrity(payload)
    - After reading:  split_and_verify(blob)
"""

import logging
import os
from typing import Optional, Tuple, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, hmac

logger = logging.getLogger(__name__)

TAG_SIZE = 32


# ============================================================================
# SECRET KEY MANAGEMENT
# ============================================================================

def get_checkpoint_secret() -> bytes:
    """
    Retrieve the HMAC key from the environment or a persistent local file.

    Priority:
    1. Environment variable QPMIX_CHECKPOINT_SECRET
    2. Key file at QPMIX_SECRET_FILE (default: .checkpoint_secret next to this module),
       generated on first use

    Returns:
        bytes: secret key for HMAC operations
    """
    env_secret = os.environ.get("QPMIX_CHECKPOINT_SECRET")
    if env_secret:
        return env_secret.encode("utf-8")

    secret_file = os.environ.get(
        "QPMIX_SECRET_FILE",
        os.path.join(os.path.dirname(os.path.abspath(__file__)), ".checkpoint_secret"),
    )
    if os.path.exists(secret_file):
        with open(secret_file, "rb") as f:
            return f.read()

    new_secret = os.urandom(32)
    with open(secret_file, "wb") as f:
        f.write(new_secret)
    logger.info(f"Generated new checkpoint signing key: {secret_file}")
    return new_secret


# ============================================================================
# TAG GENERATION / VERIFICATION
# ============================================================================

def sign_payload(payload: bytes, secret: Optional[bytes] = None) -> bytes:
    """HMAC-SHA256 tag of the payload."""
    h = hmac.HMAC(secret or get_checkpoint_secret(), hashes.SHA256())
    h.update(payload)
    return h.finalize()


def verify_payload(payload: bytes, tag: bytes, secret: Optional[bytes] = None) -> Tuple[bool, str]:
    """
    Recompute the tag and compare in constant time.

    Returns:
        (True, "") if the tag matches, (False, reason) otherwise
    """
    if len(tag) != TAG_SIZE:
        return False, f"integrity tag must be {TAG_SIZE} bytes, got {len(tag)}"

    h = hmac.HMAC(secret or get_checkpoint_secret(), hashes.SHA256())
    h.update(payload)
    try:
        h.verify(tag)
    except InvalidSignature:
        return False, "HMAC mismatch - checkpoint was modified or signed with another key"
    return True, ""


# ============================================================================
# HELPERS FOR FILE I/O
# ============================================================================

def attach_integrity(payload: bytes, secret: Optional[bytes] = None) -> bytes:
    """Pre-write hook: payload followed by its tag."""
    return payload + sign_payload(payload, secret)


def split_and_verify(blob: bytes, secret: Optional[bytes] = None) -> Tuple[bool, Union[bytes, str]]:
    """
    Post-read hook: strip and check the trailing tag.

    Returns:
        (True, payload) if valid, (False, reason) otherwise
    """
    if len(blob) < TAG_SIZE:
        return False, "missing integrity tag"
    payload, tag = blob[:-TAG_SIZE], blob[-TAG_SIZE:]
    is_valid, reason = verify_payload(payload, tag, secret)
    if not is_valid:
        return False, reason
    return True, payload
