"""
chunked storage of binary artifacts in the run store

Session transcripts and checkpoints are stored by name in the run database:

* put() - store bytes under a name, replacing any previous content
* get() / read() - return the bytes stored under a name
* exists() - check if a name is stored
* list() - the stored names, optionally matching a pattern
* remove() - delete a name and its content

An Artifact row holds the directory entry (name, size, part count), its
content is split into ArtifactPart rows of ``chunksize`` bytes. Reading
fetches batches of parts in parallel and joins them in part order. Keeping
the directory apart from the content makes list(), exists() and remove()
fast regardless of artifact size.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from io import BytesIO
from itertools import repeat

from guarded_tuning.store import Column, Record
from guarded_tuning.util import MEMORY_URLS

logger = logging.getLogger(__name__)


class Artifact(Record):
    name = Column('string', unique=True)
    size = Column('integer', default=0)  # bytes
    parts = Column('integer', default=0)


class ArtifactPart(Record):
    artifact_id = Column('integer', index=True)
    part_no = Column('integer', index=True)
    data = Column('binary')


class ArtifactStore:
    """ named binary artifacts in a dataset database

    Args:
        db (dataset.Database): the store connection
        recreate (bool): drop existing artifacts
    """
    chunksize = 1024 * 256
    max_workers = min(32, (os.cpu_count() or 1) + 4)

    def __init__(self, db, recreate=False):
        self.Artifact = Artifact.bind(db, recreate=recreate)
        self.ArtifactPart = ArtifactPart.bind(db, recreate=recreate)
        if db.url in MEMORY_URLS:
            # one shared connection, read sequentially
            self.max_workers = 1

    def _entry(self, name, errors=True):
        entry = self.Artifact.objects.find(name=name).first()
        if entry is None and errors:
            raise FileNotFoundError(f'artifact {name} does not exist')
        return entry

    def put(self, name, data, chunksize=None, batchsize=100):
        """ store data under name, replacing existing content

        Args:
            name (str): the artifact name, at most 255 characters
            data (bytes): the content
            chunksize (int): bytes per part, defaults to 256KB
            batchsize (int): parts per insert

        Returns:
            the Artifact record
        """
        chunksize = chunksize or self.chunksize
        entry = self._entry(name, errors=False)
        if entry is None:
            entry = self.Artifact(name=name, size=0, parts=0).save()
        else:
            self.ArtifactPart._table().delete(artifact_id=entry.pk)
        source = BytesIO(bytes(data))
        part_no, buffer = 0, []
        chunk = source.read(chunksize)
        while chunk:
            buffer.append(self.ArtifactPart(artifact_id=entry.pk, part_no=part_no, data=chunk))
            if len(buffer) >= batchsize:
                self.ArtifactPart.save_many(buffer)
                buffer = []
            part_no += 1
            chunk = source.read(chunksize)
        if buffer:
            self.ArtifactPart.save_many(buffer)
        entry.size = len(source.getvalue())
        entry.parts = part_no
        entry.save()
        logger.debug('stored artifact %s (%d bytes in %d parts)', name, entry.size, part_no)
        return entry

    def get(self, name, batchsize=10):
        """ the bytes stored under name

        Raises:
            FileNotFoundError: no such artifact, or parts are missing
        """
        entry = self._entry(name)

        def _read_parts(job):
            start_no, artifact_id, count = job
            parts = self.ArtifactPart.objects.find(artifact_id=artifact_id,
                                                   part_no={'between': (start_no, start_no + count - 1)},
                                                   order_by='part_no')
            data = [part.data for part in parts]
            if len(data) != min(count, entry.parts - start_no):
                raise FileNotFoundError(f'artifact {name} is missing parts from {start_no}')
            return start_no, data

        jobs = zip(range(0, entry.parts, batchsize), repeat(entry.pk), repeat(batchsize))
        with ThreadPoolExecutor(max_workers=self.max_workers,
                                thread_name_prefix='guarded-tuning-read') as tp:
            results = sorted(tp.map(_read_parts, jobs), key=lambda v: v[0])
        data = b''.join(b''.join(chunks) for _, chunks in results)
        if len(data) != entry.size:
            raise FileNotFoundError(f'artifact {name} has {len(data)} bytes, expected {entry.size}')
        return data

    read = get

    def exists(self, name):
        return self._entry(name, errors=False) is not None

    def list(self, pattern='*'):
        """ names matching a POSIX or SQL wildcard pattern, sorted """
        pattern = pattern.replace('*', '%')
        return sorted(a.name for a in self.Artifact.objects.find(name={'like': pattern}))

    def remove(self, name, errors=True):
        entry = self._entry(name, errors=errors)
        if entry is None:
            return
        self.ArtifactPart._table().delete(artifact_id=entry.pk)
        entry.delete()
