"""
Errors
Named failures raised across the engine, analysis and trace modules
"""


class KvSageError(Exception):
    """Base class for every error the toolkit raises on purpose"""


# ============================================================================
# Configuration / model shape
# ============================================================================

class ConfigError(KvSageError, ValueError):
    """An environment override or CLI value could not be parsed"""


class InvalidModelConfig(KvSageError, ValueError):
    """Head counts or head dimension violate the GQA / rotary constraints"""


class OddHeadDim(InvalidModelConfig):
    """Rotary rotation needs an even head dimension"""


class ShapeMismatch(KvSageError, ValueError):
    """An array does not have the shape the operation expects"""


# ============================================================================
# Cache partition / selection
# ============================================================================

class InvalidPlan(KvSageError, ValueError):
    """A budget plan breaks the S + G*k + R == B identity or has negative parts"""


class BudgetTooLarge(KvSageError, ValueError):
    """The budget leaves nothing to evict for this sequence length"""


class InvalidSelection(KvSageError, ValueError):
    """A top-k selection has duplicates, wrong length or out-of-range indices"""


class InvalidPosition(KvSageError, ValueError):
    """A pushed token does not directly follow the current last token"""


class InvalidPositioning(KvSageError, ValueError):
    """Window-relative positioning was requested on keys already rotated"""


class KTooLarge(KvSageError, ValueError):
    """k exceeds the number of candidates"""


class EmptyBlock(KvSageError, ValueError):
    """A block summary was requested for an empty block"""


class UnknownPolicy(KvSageError, KeyError):
    """No policy is registered under the requested name"""


# ============================================================================
# Attention
# ============================================================================

class EmptyInput(KvSageError, ValueError):
    """An operation received an empty vector or too few steps"""


class EmptyCache(KvSageError, ValueError):
    """Attention over a cache view with no entries"""


class SequenceTooShort(KvSageError, ValueError):
    """Prefill needs at least two tokens"""


# ============================================================================
# Harness
# ============================================================================

class NeedleOutsideEvictable(KvSageError, ValueError):
    """The needle position is not part of the prompt body"""


# ============================================================================
# Trace files
# ============================================================================

class TraceFormatError(KvSageError):
    """A SAGT trace file could not be decoded"""


class BadMagic(TraceFormatError):
    pass


class BadVersion(TraceFormatError):
    pass


class TruncatedPayload(TraceFormatError):
    pass
