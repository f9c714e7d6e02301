"""Cryptographic building blocks: layered additively homomorphic
encryption, oblivious 1-of-n retrieval, and oblivious sorting support."""

from .ot import (
    LAYERED,
    SPLIT,
    OtQuery,
    OtReply,
    max_block_bits,
    ot_dims,
    ot_extract,
    ot_query,
    ot_reply,
    ot_reply_many,
    plan_dims,
    query_from_bytes,
    query_to_bytes,
    reply_from_bytes,
    reply_to_bytes,
)
from .paillier import (
    Ciphertext,
    KeyPair,
    PublicKey,
    SecretKey,
    add,
    ciphertext_from_bytes,
    ciphertext_to_bytes,
    decrypt,
    encrypt,
    keygen,
    multiexp_mod,
    public_key_from_dict,
    public_key_to_dict,
    rerandomize,
    scalar_mul,
)
from .sortnet import (
    SortRun,
    apply_sort,
    comparison_pairs,
    mask_pair,
    rand_pair,
    run_network,
)

__all__ = [
    "LAYERED",
    "SPLIT",
    "OtQuery",
    "OtReply",
    "max_block_bits",
    "ot_dims",
    "ot_extract",
    "ot_query",
    "ot_reply",
    "ot_reply_many",
    "plan_dims",
    "query_from_bytes",
    "query_to_bytes",
    "reply_from_bytes",
    "reply_to_bytes",
    "Ciphertext",
    "KeyPair",
    "PublicKey",
    "SecretKey",
    "add",
    "ciphertext_from_bytes",
    "ciphertext_to_bytes",
    "decrypt",
    "encrypt",
    "keygen",
    "multiexp_mod",
    "public_key_from_dict",
    "public_key_to_dict",
    "rerandomize",
    "scalar_mul",
    "SortRun",
    "apply_sort",
    "comparison_pairs",
    "mask_pair",
    "rand_pair",
    "run_network",
]
