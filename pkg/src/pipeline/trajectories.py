import logging
from pathlib import Path
from typing import Iterable, List, Union

import pandas as pd

from core.errors import ArtifactIOError
from core.types import DatasetCollection, Trajectory

logger = logging.getLogger(__name__)

COLUMNS = ["trajectory_id", "k", "x", "u"]


def frame_to_trajectories(frame: pd.DataFrame, source: str = "<frame>") -> List[Trajectory]:
    """Split a long-format frame (trajectory_id, k, x, u) into Trajectory objects."""
    missing = [c for c in COLUMNS if c not in frame.columns]
    if missing:
        raise ArtifactIOError(f"{source}: missing columns {missing}, expected header {','.join(COLUMNS)}")
    frame = frame[COLUMNS].copy()
    frame["trajectory_id"] = frame["trajectory_id"].astype(str)
    trajectories = []
    for tid, rows in frame.groupby("trajectory_id", sort=True):
        rows = rows.sort_values("k", kind="stable")
        try:
            trajectories.append(Trajectory(tid, rows["k"].to_numpy(), rows["x"].to_numpy(), rows["u"].to_numpy()))
        except ValueError as e:
            raise ArtifactIOError(f"{source}: {e}") from e
    return trajectories


def read_trajectory_csv(path: Union[str, Path]) -> List[Trajectory]:
    path = Path(path)
    try:
        frame = pd.read_csv(path, encoding="utf-8", dtype={"trajectory_id": str})
    except FileNotFoundError:
        raise ArtifactIOError(f"trajectory file {path} not found") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ArtifactIOError(f"cannot parse {path}: {e}") from e
    trajectories = frame_to_trajectories(frame, str(path))
    logger.info(f"✅ Loaded {len(trajectories)} trajectories ({len(frame)} samples) from {path}")
    return trajectories


def load_collection(paths: Iterable[Union[str, Path]], role: str = "complete") -> DatasetCollection:
    """Read several CSV files into one collection; trajectory ids must be unique across files."""
    trajectories: List[Trajectory] = []
    seen = set()
    for path in paths:
        for t in read_trajectory_csv(path):
            if t.id in seen:
                raise ArtifactIOError(f"trajectory id '{t.id}' appears in more than one file")
            seen.add(t.id)
            trajectories.append(t)
    if not trajectories:
        raise ArtifactIOError(f"no {role} trajectories found")
    return DatasetCollection(tuple(trajectories), role=role)


def write_trajectory_csv(trajectories: Iterable[Trajectory], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.concat(
        [pd.DataFrame({"trajectory_id": t.id, "k": t.k, "x": t.x, "u": t.u}) for t in trajectories],
        ignore_index=True,
    )
    frame.to_csv(path, index=False, encoding="utf-8", float_format="%.10g")
    return path
