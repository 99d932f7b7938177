"""Base class for Monte Carlo studies that export their results as CSV tables."""
import os
from typing import Dict, List

import pandas as pd

from matlrt import __version__


class Simulation:
    """Base class for studies. Results are written as a CSV table preceded by `# key: value`
    provenance lines."""
    export_directory: str
    identifier: str
    index_column: str = "index"

    def __init__(self, export_directory: str, identifier: str):
        self.export_directory = export_directory
        self.identifier = identifier

    def simulate(self):
        """Run the study, saving its state only in the study object itself."""
        raise NotImplementedError

    def get_results(self) -> Dict[str, List]:
        """:returns: results of the study as a dictionary of columns, including the index
        column."""
        raise NotImplementedError

    def get_metadata(self) -> Dict[str, str]:
        """:returns: provenance written in front of the table; subclasses extend it."""
        return {"version": __version__}

    def get_data(self) -> pd.DataFrame:
        """:returns: Results of the study on the basis of the `get_results()` method."""
        results = dict(self.get_results())
        index = results.pop(self.index_column)
        data = pd.DataFrame(results, index=index)
        data.index.set_names(self.index_column, inplace=True)
        return data

    def get_path(self) -> str:
        """:returns: the CSV path given by the export directory and the identifier."""
        return os.path.join(self.export_directory, self.identifier + ".csv")

    def write_csv(self) -> str:
        """Write the provenance lines and the results to the CSV file given by the export
        directory and the study identifier.
        :returns: the path of the file"""
        os.makedirs(self.export_directory, exist_ok=True)
        path = self.get_path()
        with open(path, "w", encoding="utf-8", newline="") as file:
            for key, value in self.get_metadata().items():
                file.write(f"# {key}: {value}\n")
            self.get_data().to_csv(file, float_format="%.17g", lineterminator="\n")
        return path


def read_study_csv(path: str) -> pd.DataFrame:
    """Read a table written by `Simulation.write_csv`, skipping the provenance lines."""
    return pd.read_csv(path, comment="#")


def read_study_metadata(path: str) -> Dict[str, str]:
    """:returns: the `# key: value` provenance lines of a study CSV."""
    metadata = {}
    with open(path, "r", encoding="utf-8") as file:
        for line in file:
            if not line.startswith("# "):
                break
            key, _, value = line[2:].rstrip("\n").partition(": ")
            metadata[key] = value
    return metadata
