"""Two-party private recommendation protocol: anonymization, oblivious
fetches, masked comparison rounds, collation, and session management."""

from .anonymization import (
    INFREQUENT,
    AnonymizationTables,
    anonymize_plain,
    build_anonymization,
    de_anonymize_plain,
    item_frequencies,
)
from .messages import (
    MODE_APPROX,
    MODE_EXACT,
    PROTOCOL_VERSION,
    STAGE_ANONYMIZE,
    STAGE_DEANONYMIZE,
    STAGE_FETCH,
    ApproxParams,
    ClientHello,
    MessageType,
    PublicParams,
    SortRequest,
    SortResponse,
    hello_from_bytes,
    hello_to_bytes,
    pack_bits,
    params_from_bytes,
    params_to_bytes,
    query_batch_from_bytes,
    query_batch_to_bytes,
    reply_batch_from_bytes,
    reply_batch_to_bytes,
    sort_request_from_bytes,
    sort_request_to_bytes,
    sort_response_from_bytes,
    sort_response_to_bytes,
    unpack_bits,
)
from .records import (
    BucketRule,
    EnhancedDb,
    PrivateRecord,
    anonymized_itemset,
    blocks_to_payload,
    build_enhanced_db,
    build_private_table,
    chunk_capacity,
    chunk_tables,
    chunks_needed,
    decode_bucket_payload,
    decode_exact_payload,
    encode_bucket_payload,
    encode_exact_payload,
    enhanced_query_keys,
    payload_to_blocks,
    signature_map_order,
)
from .session import (
    TRANSACTION_CAP,
    WEIGHT_BOUND,
    ClientSession,
    LoopbackChannel,
    ProtocolError,
    ServerConfig,
    ServerEngine,
    ServerSession,
    SessionTables,
    run_private_query,
)

__all__ = [
    "INFREQUENT",
    "AnonymizationTables",
    "anonymize_plain",
    "build_anonymization",
    "de_anonymize_plain",
    "item_frequencies",
    "MODE_APPROX",
    "MODE_EXACT",
    "PROTOCOL_VERSION",
    "STAGE_ANONYMIZE",
    "STAGE_DEANONYMIZE",
    "STAGE_FETCH",
    "ApproxParams",
    "ClientHello",
    "MessageType",
    "PublicParams",
    "SortRequest",
    "SortResponse",
    "hello_from_bytes",
    "hello_to_bytes",
    "pack_bits",
    "params_from_bytes",
    "params_to_bytes",
    "query_batch_from_bytes",
    "query_batch_to_bytes",
    "reply_batch_from_bytes",
    "reply_batch_to_bytes",
    "sort_request_from_bytes",
    "sort_request_to_bytes",
    "sort_response_from_bytes",
    "sort_response_to_bytes",
    "unpack_bits",
    "BucketRule",
    "EnhancedDb",
    "PrivateRecord",
    "anonymized_itemset",
    "blocks_to_payload",
    "build_enhanced_db",
    "build_private_table",
    "chunk_capacity",
    "chunk_tables",
    "chunks_needed",
    "decode_bucket_payload",
    "decode_exact_payload",
    "encode_bucket_payload",
    "encode_exact_payload",
    "enhanced_query_keys",
    "payload_to_blocks",
    "signature_map_order",
    "TRANSACTION_CAP",
    "WEIGHT_BOUND",
    "ClientSession",
    "LoopbackChannel",
    "ProtocolError",
    "ServerConfig",
    "ServerEngine",
    "ServerSession",
    "SessionTables",
    "run_private_query",
]
