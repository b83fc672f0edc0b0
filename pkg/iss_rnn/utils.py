import csv
import hashlib
import json
import os
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union


def hash_url(url: Union[str, bytes]) -> str:
    """SHA1 hex digest of a corpus URL.

    The downloader keys its cache on this digest, see `corpus_cache_path`.
    Raises TypeError for anything but str or bytes.
    """
    if isinstance(url, str):
        url = url.encode('utf-8')
    elif not isinstance(url, bytes):
        raise TypeError("URL must be a string or bytes")
    return hashlib.sha1(url).hexdigest()


def corpus_cache_path(url: Union[str, bytes], cache_dir: str) -> str:
    """Where a downloaded corpus is cached: `<cache_dir>/corpus-<first 12 hex digits>.txt`."""
    return os.path.join(cache_dir, f"corpus-{hash_url(url)[:12]}.txt")


def config_fingerprint(config: Mapping[str, Any]) -> str:
    """SHA1 of the canonical JSON form of a configuration.

    Key order and whitespace do not change the fingerprint.
    """
    canonical = json.dumps(config, sort_keys=True, separators=(',', ':'))
    return hashlib.sha1(canonical.encode('utf-8')).hexdigest()


def write_csv_report(
    path: str, rows: Sequence[Dict[str, Any]], fingerprint: str, fieldnames: Optional[List[str]] = None
) -> None:
    """Write ``rows`` to a CSV file with a header and a fingerprint column.

    Every row carries ``config_fingerprint`` so a report can be traced back
    to the configuration that produced it.
    """
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    fieldnames = list(fieldnames) + ['config_fingerprint']
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, 'config_fingerprint': fingerprint})


def append_csv_row(path: str, row: Dict[str, Any], fingerprint: str) -> None:
    """Append one row, writing the header first if the file is new."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    fieldnames = list(row.keys()) + ['config_fingerprint']
    with open(path, 'a', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        if fresh:
            writer.writeheader()
        writer.writerow({**row, 'config_fingerprint': fingerprint})
