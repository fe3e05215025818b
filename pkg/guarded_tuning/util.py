import json
import logging
import os
from base64 import b64encode, b64decode
from json import JSONDecoder

import dataset
import numpy as np

logger = logging.getLogger(__name__)

STORE_FILE = 'run.sqlite'
MEMORY_URLS = ('sqlite://', 'sqlite:///:memory:')
DB_CONNECTIONS = {}


def store_url(directory=None):
    """ the run store URL, GT_STORE_URL takes precedence over the run directory """
    url = os.environ.get('GT_STORE_URL')
    if url:
        return url
    if directory is None:
        return 'sqlite://'
    return f'sqlite:///{os.path.abspath(os.path.join(directory, STORE_FILE))}'


def connect(url=None, directory=None, recreate=False, **kwargs):
    """ connect to a run store

    Args:
        url (str): the database URL, defaults to store_url(directory)
        directory (str): the run directory holding run.sqlite
        recreate (bool): drop all existing records and artifacts
        **kwargs: passed to dataset.connect

    Returns:
        RunStore
    """
    from guarded_tuning.store import RunStore

    url = url or store_url(directory)
    db = DB_CONNECTIONS.get(url)
    if db is None or getattr(db, 'engine', None) is None:
        if url.startswith('sqlite://'):
            # a memory database lives in a single shared connection, files get one per thread
            from sqlalchemy.pool import StaticPool, NullPool
            pool = StaticPool if url in MEMORY_URLS else NullPool
            kwargs.setdefault('engine_kwargs', dict(connect_args=dict(check_same_thread=False),
                                                    poolclass=pool, pool_pre_ping=True))
            kwargs.setdefault('sqlite_wal_mode', False)
        db = dataset.connect(url=url, **kwargs)
        DB_CONNECTIONS[url] = db
        logger.debug('connected run store %s', url)
    return RunStore(db, recreate=recreate)


def disconnect(url=None, directory=None):
    db = DB_CONNECTIONS.pop(url or store_url(directory), None)
    if db is not None:
        db.close()


class SpecialEncoder(json.JSONEncoder):
    """ json encoder for numpy values and bytes """

    def default(self, obj):  # noqa
        if isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, bytes):
            return {'_bytes_': b64encode(obj).decode('utf8')}
        elif isinstance(obj, (range, set, tuple)):
            return list(obj)
        return json.JSONEncoder.default(self, obj)


class SpecialDecoder(JSONDecoder):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, object_hook=self.decode_dict, **kwargs)

    def decode_dict(self, d):
        if set(d) == {'_bytes_'}:
            return b64decode(d['_bytes_'])
        return d


def plain(value):
    """ numpy scalars and tuples to builtins, for yaml.safe_dump """
    return json.loads(json.dumps(value, cls=SpecialEncoder))
