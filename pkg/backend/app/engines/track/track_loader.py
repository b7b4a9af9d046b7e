"""
Track loader.
Loads track segment specifications from JSON files and builds racelines.
"""
import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from loguru import logger
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import TrackSpecError
from app.engines.track.raceline import Raceline, TrackSpec, generate_track


class TrackLoader:
    """Load track specs from ``<name>_track.json`` files and cache generated racelines."""

    def __init__(self, tracks_path: Optional[str] = None):
        """Initialize track loader."""
        self.tracks_path = Path(tracks_path or settings.TRACKS_PATH)
        self.spec_cache: Dict[str, TrackSpec] = {}
        self.raceline_cache: Dict[Tuple[str, float, float, Optional[float]], Raceline] = {}
        logger.info(f"Track loader initialized with path: {self.tracks_path}")

    def load_spec(self, name: str) -> TrackSpec:
        """
        Load the segment specification of a track.

        Args:
            name: Track name (training, heldout_a, heldout_b) or a path to a JSON file

        Returns:
            Validated track specification
        """
        if name in self.spec_cache:
            logger.debug(f"Loading track {name} from cache")
            return self.spec_cache[name]

        track_file = Path(name) if name.endswith(".json") else self.tracks_path / f"{name}_track.json"
        if not track_file.exists():
            logger.error(f"Track file not found: {track_file}")
            raise TrackSpecError(f"Track file not found: {track_file}")

        try:
            with open(track_file, "r", encoding="utf-8") as f:
                raw = json.load(f)
            raw.setdefault("name", track_file.stem.replace("_track", ""))
            spec = TrackSpec.model_validate(raw)
        except (json.JSONDecodeError, ValidationError) as e:
            logger.error(f"Failed to load track from {track_file}: {e}")
            raise TrackSpecError(f"Invalid track file {track_file}: {e}") from e

        self.spec_cache[name] = spec
        logger.info(f"Loaded track {spec.name} with {len(spec.segments)} segments")
        return spec

    def load_raceline(self, name: str, a_y_max: float, a_x_max: float, v_top: Optional[float] = None) -> Raceline:
        """Generate (or fetch from cache) the raceline of a track for the given limits."""
        key = (name, a_y_max, a_x_max, v_top)
        if key not in self.raceline_cache:
            spec = self.load_spec(name)
            if v_top is not None:
                spec = spec.model_copy(update={"v_top": v_top})
            self.raceline_cache[key] = generate_track(spec, a_y_max, a_x_max)
        return self.raceline_cache[key]

    def get_all_tracks(self) -> List[str]:
        """Get list of all available track names."""
        return sorted(file.stem.replace("_track", "") for file in self.tracks_path.glob("*_track.json"))
