"""Source-free open-set domain adaptation by unknown sample discovery.

Desk-scale numpy implementation: JSD-based known/unknown separation with an
equal-prior two-component GMM, EMA teacher / student co-training and a
curriculum-weighted composite objective, evaluated with OS*, UNK and HOS.
"""

__version__ = "0.1.0"

from sfosda.errors import (  # noqa: F401
    ConfigError,
    GenerationError,
    IntegrityError,
    InvalidInputError,
    NumericAbort,
    ParseError,
    SchemaError,
)
