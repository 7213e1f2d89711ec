"""Export configuration shared by every backend."""

from dataclasses import dataclass
from pathlib import Path

HASH_MODEL_ID = "hash-sim"

DEFAULT_GRID_SIDE = 32
DEFAULT_INPUT_SIDE = 448
DEFAULT_DIM = 128


class AdapterError(RuntimeError):
    """Raised when an export cannot proceed (bad config, model mismatch)."""


@dataclass(frozen=True)
class AdapterConfig:
    """Declares what the exporter must produce.

    ``grid_side`` and ``dim`` are contracts, not hints: if the backend
    yields a different patch count or vector width, the export aborts
    before writing anything.  ``include_special_tokens`` controls whether
    query marker tokens (begin/end of sequence) keep their vectors in the
    exported file; the choice is recorded in the output manifest.
    """

    output_dir: Path
    model_id: str = HASH_MODEL_ID
    device: str = "cpu"
    batch_size: int = 8
    grid_side: int = DEFAULT_GRID_SIDE
    input_side: int = DEFAULT_INPUT_SIDE
    dim: int = DEFAULT_DIM
    include_special_tokens: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        if not self.model_id:
            raise AdapterError("model_id must be non-empty")
        if self.batch_size < 1:
            raise AdapterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.grid_side < 1:
            raise AdapterError(f"grid_side must be >= 1, got {self.grid_side}")
        if self.dim < 1:
            raise AdapterError(f"dim must be >= 1, got {self.dim}")
        if self.input_side < self.grid_side or self.input_side % self.grid_side:
            raise AdapterError(
                f"input_side ({self.input_side}) must be a positive multiple "
                f"of grid_side ({self.grid_side})"
            )

    @property
    def patch_count(self) -> int:
        return self.grid_side * self.grid_side
