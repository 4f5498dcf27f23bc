"""cipherformer: two-party private transformer inference.

The package splits along the natural trust boundary of the protocol:

  * ``fixedpoint``  -- scaled-integer encoding shared by every layer
  * ``pahe``        -- packed additively homomorphic encryption (RLWE/RNS)
  * ``helinear``    -- linear algebra on packed ciphertexts (matvec, ct-matmul)
  * ``gc``          -- boolean circuits, half-gates garbling, oblivious transfer
  * ``activations`` -- circuit builders for the non-linear layers
  * ``stages``      -- per-stage width plans and share-switching circuits
  * ``model``       -- plaintext reference transformer (float + bit-exact fixed)
  * ``protocol``    -- wire framing, share conversion, the full 2-party session
  * ``cli``         -- command line front end

Only light, commonly useful names are re-exported here; import the submodule
for anything else.
"""

from .errors import (
    CipherformerError,
    CircuitError,
    DecryptionError,
    EncodingError,
    GarbleError,
    NoiseBudgetError,
    ParameterError,
    ProtocolError,
)

__version__ = "0.1.0"

__all__ = [
    "CipherformerError",
    "ParameterError",
    "EncodingError",
    "NoiseBudgetError",
    "DecryptionError",
    "CircuitError",
    "GarbleError",
    "ProtocolError",
    "__version__",
]
