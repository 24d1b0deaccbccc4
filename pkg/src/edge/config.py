# src/edge/config.py
import os
from dataclasses import dataclass, field

# Load .env if present
try:
    from dotenv import load_dotenv
    load_dotenv()
except Exception:
    pass


def _int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.split(",") if x.strip())


def _float_list(raw: str) -> tuple[float, ...]:
    return tuple(float(x) for x in raw.split(",") if x.strip())


@dataclass(frozen=True)
class _Settings:
    # --- Time ---
    WINDOW_SECONDS: int = int(os.getenv("WINDOW_SECONDS", "300"))   # scheduling window T
    SEGMENT_SECONDS: int = int(os.getenv("SEGMENT_SECONDS", "10"))  # segment duration tau

    # --- Media / hardware ---
    BITRATE_LADDER: tuple[int, ...] = field(
        default_factory=lambda: _int_list(os.getenv("BITRATE_LADDER", "400,750,1000,2500"))
    )  # Kbps, 240p..720p
    BANDWIDTH_CLASSES_MBPS: tuple[int, ...] = field(
        default_factory=lambda: _int_list(os.getenv("BANDWIDTH_CLASSES_MBPS", "5,10,20,40,80"))
    )

    # --- Workload ---
    ZIPF_EXPONENT: float = float(os.getenv("ZIPF_EXPONENT", "1.0"))
    DEFAULT_SEED: int = int(os.getenv("DEFAULT_SEED", "7"))

    # --- Runner ---
    MAX_WORKERS: int = int(os.getenv("MAX_WORKERS", "4"))
    DISPATCH_LAG: int = int(os.getenv("DISPATCH_LAG", "1"))          # 0 = dispatch the scheduled window
    ALPHA_GRID: tuple[float, ...] = field(
        default_factory=lambda: _float_list(os.getenv("ALPHA_GRID", "0.2,0.4,0.6,0.8,1.0"))
    )  # cache shares a schedule may fall back to
    STRICT_INVARIANTS: bool = os.getenv("STRICT_INVARIANTS", "1") not in ("0", "false", "False", "")
    OUT_DIR: str = os.getenv("OUT_DIR", "out")
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    @property
    def bandwidth_classes_kbps(self) -> tuple[int, ...]:
        return tuple(b * 1000 for b in self.BANDWIDTH_CLASSES_MBPS)


settings = _Settings()
