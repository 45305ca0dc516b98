from .chain import (
    ChainVerificationError,
    ContractEvent,
    Ledger,
    LedgerBlock,
    LedgerError,
    check_chain,
    export_chain,
    first_bad_height,
    load_chain,
    verify_chain,
)
from .consensus import (
    Assignment,
    MissingEvaluation,
    RotationError,
    aggregate_top_k,
    assign_nodes,
    evaluate,
    finalize_scores,
    run_bsfl,
    run_bsfl_cycle,
    select_top_k,
)
