from functools import lru_cache
import os
from typing import List

import numpy as np
from pandas.core.frame import DataFrame

from . import datatypes

CSV_SCHEMA_VERSION = 1


def derive_seed(master: int, stream: datatypes.Stream, *index: int) -> int:
    """
    Counter-based split of a master seed. The result only depends on the master
    seed, the stream and the index tuple, so repetition r of a setting can be
    replayed on its own and in any order.

    :param master:      Master seed of the experiment.
    :param stream:      Which Brownian motion the seed drives.
    :param index:       Counters, e.g. (setting, repetition) or (path,).
    :return:            A 63-bit integer seed.
    """
    sequence = np.random.SeedSequence([int(master), int(stream), *map(int, index)])
    return int(sequence.generate_state(1, np.uint64)[0] >> np.uint64(1))


@lru_cache(maxsize=None)
def git_revision() -> str:
    try:
        import git

        repo = git.Repo(
            os.path.dirname(os.path.realpath(__file__)), search_parent_directories=True
        )  # pyright: ignore
        return repo.head.object.hexsha[:12]
    except ImportError:
        # GitPython refuses to import without a git executable
        return "unknown"
    except (git.InvalidGitRepositoryError, git.NoSuchPathError, ValueError):
        return "unknown"


def csv_header() -> str:
    return f"# bdsde-csv schema={CSV_SCHEMA_VERSION} revision={git_revision()}\n"


def write_csv(df: DataFrame, filename: str):
    """
    Write a table preceded by the schema comment line. Only the comment line
    depends on the checkout; the body is a function of the run's inputs.
    """
    os.makedirs(os.path.dirname(filename) or ".", exist_ok=True)
    with open(filename, "w") as f:
        f.write(csv_header())
        f.write(df.to_csv(index=False, lineterminator="\n", float_format="%.12g"))


def read_csv_body(filename: str) -> str:
    with open(filename) as f:
        lines = f.readlines()
    return "".join(line for line in lines if not line.startswith("#"))


def component_columns(prefix: str, count: int) -> List[str]:
    """Column names for a vector quantity, e.g. y0_mean or y0_mean_0, y0_mean_1."""
    if count == 1:
        return [prefix]
    return [f"{prefix}_{i}" for i in range(count)]

