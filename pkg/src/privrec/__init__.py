"""Two-party privacy-preserving recommendations from association rules.

Plain building blocks: `rules` (criteria and the direct scan), `exact`
(two-level perfect hash tables), `lsh` (signature-bucket candidate
retrieval), `data` (rule files and synthetic generators).

Private operation: `crypto` (additively homomorphic encryption, folded
oblivious transfer, masked comparison), `protocol` (the client/server
conversation), `transport` (TCP framing), `bench` and `cli` (measurement
and command line).
"""

from . import bench, data, exact, lsh, rules, transport
from .data import LoadReport, SyntheticSpec, gen_synthetic, gen_transactions, load_rules, save_rules
from .protocol import (
    ClientSession,
    LoopbackChannel,
    MODE_APPROX,
    MODE_EXACT,
    ProtocolError,
    ServerConfig,
    ServerEngine,
)
from .rules import (
    AllAssoc,
    AnyAssoc,
    AssociationRule,
    Ordering,
    OrderingFunction,
    RuleDatabase,
    Top1Assoc,
    TopAssoc,
    TopKAssoc,
    gscs,
    recommendation_from_rules,
    select_rules,
)
from .transport import TcpChannel, run_server

__version__ = "0.1.0"

__all__ = [
    "AllAssoc",
    "AnyAssoc",
    "AssociationRule",
    "ClientSession",
    "LoadReport",
    "LoopbackChannel",
    "MODE_APPROX",
    "MODE_EXACT",
    "Ordering",
    "OrderingFunction",
    "ProtocolError",
    "RuleDatabase",
    "ServerConfig",
    "ServerEngine",
    "SyntheticSpec",
    "TcpChannel",
    "Top1Assoc",
    "TopAssoc",
    "TopKAssoc",
    "bench",
    "data",
    "exact",
    "gen_synthetic",
    "gen_transactions",
    "gscs",
    "load_rules",
    "lsh",
    "recommendation_from_rules",
    "rules",
    "run_server",
    "save_rules",
    "select_rules",
    "transport",
    "__version__",
]
