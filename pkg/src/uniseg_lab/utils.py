import csv
import json
import logging
import os
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence

import yaml
from jsonschema import Draft202012Validator
from jsonschema.exceptions import ValidationError

from .errors import ConfigError
from .uniseg_types import Json

THREADS_ENV_VAR = 'UNISEG_LAB_THREADS'
LOG_FILE_NAME = 'uniseg_lab.log'


def load_document(path: Path, schema: Optional[Json] = None) -> Json:
    """Loads a YAML or JSON document and (optionally) validates it against a schema.\n
    Since JSON is a subset of YAML, yaml.safe_load reads both.

    Args:
        path (Path): The document to be read
        schema (Optional[Json], optional): A jsonschema to validate against. Defaults to None.

    Raises:
        ConfigError: If the file cannot be read, cannot be parsed, or fails validation.

    Returns:
        Json: The parsed document
    """
    try:
        with open(path, mode='r', encoding='utf-8') as f:
            doc = yaml.safe_load(f.read())
    except OSError as ex:
        raise ConfigError(f'Error! Cannot read {path}: {ex}') from ex
    except yaml.YAMLError as ex:
        raise ConfigError(f'Error! Cannot parse {path}: {ex}') from ex
    if not isinstance(doc, dict):
        raise ConfigError(f'Error! {path} must contain a mapping at the top level.')
    if schema is not None:
        validate(doc, schema, str(path))
    return doc


def validate(doc: Json, schema: Json, where: str = 'document') -> None:
    """Validates doc against schema, reporting every error rather than just the first.

    Args:
        doc (Json): The document
        schema (Json): The jsonschema
        where (str, optional): A name for doc used in the error message. Defaults to 'document'.

    Raises:
        ConfigError: If doc does not validate.
    """
    validator = Draft202012Validator(schema)
    errors: List[ValidationError] = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        lines = [f"  {'/'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError(f'Error! {where} failed validation:\n' + '\n'.join(lines))


def write_json(path: Path, doc: Any) -> None:
    """Writes doc as JSON with sorted keys, so identical inputs give identical bytes.

    Args:
        path (Path): The output file
        doc (Any): Any JSON-serializable object
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode='w', encoding='utf-8') as f:
        f.write(json.dumps(doc, indent=2, sort_keys=True))
        f.write('\n')


def read_json(path: Path) -> Any:
    with open(path, mode='r', encoding='utf-8') as f:
        return json.loads(f.read())


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Writes a CSV file with '\\n' line endings.

    Args:
        path (Path): The output file
        header (Sequence[str]): The column names
        rows (Iterable[Sequence[Any]]): The rows
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode='w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(list(header))
        for row in rows:
            writer.writerow(list(row))


def read_csv(path: Path) -> List[List[str]]:
    with open(path, mode='r', encoding='utf-8', newline='') as f:
        return [row for row in csv.reader(f)]


def resolve_threads(threads: Optional[int]) -> int:
    """--threads wins; otherwise the UNISEG_LAB_THREADS environment variable; otherwise 1.

    Args:
        threads (Optional[int]): The value of --threads, if given

    Raises:
        ConfigError: If the resolved value is not a positive integer

    Returns:
        int: The number of worker threads
    """
    if threads is None:
        env = os.environ.get(THREADS_ENV_VAR, '1')
        try:
            threads = int(env)
        except ValueError as ex:
            raise ConfigError(f'Error! {THREADS_ENV_VAR}={env} is not an integer.') from ex
    if threads < 1:
        raise ConfigError(f'Error! The number of threads must be positive, not {threads}')
    return threads


def setup_logging(out_dir: Path, verbose: bool = False) -> None:
    """Sends timestamped log records to out_dir/uniseg_lab.log and warnings to the console.\n
    Timestamps only ever go to the log file; every other artifact stays byte-identical across reruns.

    Args:
        out_dir (Path): The output directory of the current command
        verbose (bool, optional): Also show INFO records on the console. Defaults to False.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger('uniseg_lab')
    root.setLevel(logging.DEBUG)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    file_handler = logging.FileHandler(out_dir / LOG_FILE_NAME, mode='a', encoding='utf-8')
    file_handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s'))
    file_handler.setLevel(logging.DEBUG)
    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter('%(levelname)s: %(message)s'))
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    root.addHandler(file_handler)
    root.addHandler(console)
