"""
run store: active records over a dataset database

Every run directory holds a ``run.sqlite`` database. Records declare their
columns once and are bound to a database on connect, the same record class
can be bound to many databases at once (one per run directory)::

    from guarded_tuning.util import connect

    store = connect(directory='runs/online-s0')
    store.runs(run_id='...', architecture='online', report={...}).save()
    for run in store.runs.objects.find(architecture='online'):
        print(run.run_id, run.report['accuracy'])

Binary artifacts live in the same database, see guarded_tuning.artifacts.
"""
import json
import logging
import re

from dataset import Table
from sqlalchemy import LargeBinary

logger = logging.getLogger(__name__)


class Column:
    """ a typed record column

    Args:
        db_type (str): one of json, binary, string, integer, float
        default: value or callable
        **column_kwargs: passed to dataset.Table.create_column, e.g. unique=True
    """
    _db_types = {
        'json': lambda types: types.text,
        'binary': lambda types: LargeBinary,
        'string': lambda types: types.string(length=255),
        'integer': lambda types: types.integer,
        'float': lambda types: types.float,
    }

    def __init__(self, db_type='string', name=None, default=None, **column_kwargs):
        if db_type not in self._db_types:
            raise ValueError(f'unknown column type {db_type}, expected one of {", ".join(self._db_types)}')
        self.db_type = db_type
        self.name = name
        self._default = default
        self.column_kwargs = column_kwargs
        self.to_db = getattr(self, f'to_db_{db_type}', self.to_db)
        self.to_python = getattr(self, f'to_python_{db_type}', self.to_python)

    def __set_name__(self, record, name):
        self.name = self.name or name

    def __get__(self, obj, objtype=None):
        if obj is None:
            return self
        return obj._values.get(self.name)

    def __set__(self, obj, value):
        obj._values[self.name] = value

    @property
    def default(self):
        if self._default is None and self.db_type == 'json':
            return {}
        return self._default() if callable(self._default) else self._default

    def type_for_database(self, db):
        return self._db_types[self.db_type](db.types)

    def to_db(self, value):
        return value

    def to_python(self, value):
        return value

    def to_db_json(self, value):
        from guarded_tuning.util import SpecialEncoder
        return json.dumps(value, cls=SpecialEncoder, sort_keys=True)

    def to_python_json(self, value):
        from guarded_tuning.util import SpecialDecoder
        return json.loads(value, cls=SpecialDecoder) if value is not None else {}

    def to_db_binary(self, value):
        return bytes(value) if value is not None else None

    def __repr__(self):
        return f'Column(db_type={self.db_type}, name={self.name})'


class TableSpec:
    """ the table a record class is stored in

    Collects the Column() declarations of a Record class. On binding to a
    database the table and all columns are created if missing.
    """
    primary_id = 'id'

    def __init__(self, table_name, columns):
        self.table_name = table_name
        self.columns = dict(columns)
        self.table_obj = None

    def create_table(self, db, recreate=False):
        if recreate and self.table_name in db:
            db[self.table_name].drop()
        table = Table(db, self.table_name, primary_id=self.primary_id,
                      primary_type=db.types.integer, auto_create=True)
        for name, column in self.columns.items():
            table.create_column(name, column.type_for_database(db), **column.column_kwargs)
        self.table_obj = table
        return table


class RecordQuery:
    """ Record.objects, returns record instances instead of dicts """

    def __init__(self, record):
        self.record = record

    def all(self, **kwargs):
        return self.find(**kwargs)

    def find(self, **kwargs):
        """ all records matching the filter, e.g. find(phase='finetune', order_by='stage') """
        kwargs.setdefault('order_by', self.record._spec.primary_id)
        table = self.record._table()
        query = lambda: (self.record._from_db(**row) for row in table.find(**kwargs))  # noqa
        return QueryResult(query)

    def get(self, **kwargs):
        """ the first record matching the filter

        Raises:
            ValueError: no such record
        """
        kwargs.setdefault('order_by', self.record._spec.primary_id)
        if 'pk' in kwargs:
            kwargs[self.record._spec.primary_id] = kwargs.pop('pk')
        row = self.record._table().find_one(**kwargs)
        if row is None:
            raise ValueError(f'cannot find {self.record.__name__} for {kwargs}')
        return self.record._from_db(**row)

    def count(self, **kwargs):
        return self.record._table().count(**kwargs)


class QueryResult:
    def __init__(self, query):
        self.query = query
        self.cache = None

    def __iter__(self):
        return iter(self.as_list())

    def __len__(self):
        return len(self.as_list())

    def as_list(self):
        if self.cache is None:
            self.cache = list(self.query())
        return self.cache

    def first(self):
        records = self.as_list()
        return records[0] if records else None

    def delete(self):
        for record in self:
            record.delete()


class Record:
    """ a single row of a dataset.Table

    Usage::

        class RunRecord(Record):
            run_id = Column('string', unique=True)
            report = Column('json')

        runs = RunRecord.bind(db)
        runs(run_id='x', report={'accuracy': 1.0}).save()
        runs.objects.get(run_id='x').report
    """
    _spec = None
    _db = None

    def __init__(self, **values):
        self.__dict__['_values'] = {}
        for name, column in self.columns().items():
            value = values.get(name)
            self._values[name] = value if value is not None else column.default
        if values.get('id') is not None:
            self._values['id'] = values['id']

    @classmethod
    def columns(cls):
        columns = {}
        for klass in reversed(cls.__mro__):
            columns.update({k: v for k, v in vars(klass).items() if isinstance(v, Column)})
        return columns

    @classmethod
    def bind(cls, db, recreate=False):
        """ a subclass of this record linked to db, creating the table if needed """
        camel2snake = lambda v: re.sub(r'(?<!^)(?=[A-Z])', '_', v).lower()  # noqa
        record = type(cls.__name__, (cls,), dict())
        record._db = db
        record._spec = TableSpec(camel2snake(cls.__name__), cls.columns())
        record._spec.create_table(db, recreate=recreate)
        record.objects = RecordQuery(record)
        return record

    @classmethod
    def _check_bound(cls):
        if cls._spec is None:
            raise AttributeError(f'{cls.__name__} is not bound to a database, use {cls.__name__}.bind(db)')

    @classmethod
    def save_many(cls, records, chunk_size=1000):
        """ insert many records, without updating their primary keys """
        cls._table().insert_many([r._to_db() for r in records], chunk_size=chunk_size)

    @classmethod
    def _from_db(cls, **row):
        values = {k: column.to_python(row.get(k)) for k, column in cls.columns().items()}
        return cls(id=row.get(cls._spec.primary_id), **values)

    @classmethod
    def _table(cls):
        cls._check_bound()
        return cls._spec.table_obj

    @property
    def pk(self):
        return self._values.get('id')

    def save(self):
        """ insert, or update if the record has a primary key """
        table = self._table()
        if self.pk is None:
            self._values['id'] = table.insert(self._to_db())
        else:
            table.upsert(dict(self._to_db(), id=self.pk), ['id'])
        return self

    def delete(self):
        return self._table().delete(id=self.pk)

    def to_dict(self):
        return {k: v for k, v in self._values.items() if k != 'id'}

    def _to_db(self):
        return {k: column.to_db(self._values.get(k)) for k, column in self.columns().items()}

    def __getattr__(self, k):
        values = self.__dict__.get('_values', {})
        if k not in values:
            raise AttributeError(k)
        return values[k]

    def __setattr__(self, k, v):
        self._values[k] = v

    def __repr__(self):
        return f'<{self.__class__.__name__}(pk={self.pk})>'


class RunRecord(Record):
    run_id = Column('string', unique=True)
    architecture = Column('string')
    task = Column('string')
    seed = Column('integer')
    config_hash = Column('string')
    config = Column('json')
    report = Column('json')


class AttackRecord(Record):
    run_id = Column('string', index=True)
    phase = Column('string')
    stages = Column('string')
    mean = Column('float')
    report = Column('json')


class RunStore(dict):
    """ the records and artifacts of one store database

    Attributes:
        db (dataset.Database): the connection
        runs: RunRecord bound to db
        attacks: AttackRecord bound to db
        artifacts (ArtifactStore): chunked binary storage
    """

    def __init__(self, db, recreate=False):
        from guarded_tuning.artifacts import ArtifactStore
        super().__init__(db=db,
                         runs=RunRecord.bind(db, recreate=recreate),
                         attacks=AttackRecord.bind(db, recreate=recreate),
                         artifacts=ArtifactStore(db, recreate=recreate))
        self.__dict__ = self

    def save_run(self, run_id, config, report):
        """ insert or replace the run's record """
        existing = self.runs.objects.find(run_id=run_id).first()
        record = existing or self.runs(run_id=run_id)
        record.architecture = config.architecture
        record.task = config.task.name
        record.seed = config.seed
        record.config_hash = config.config_hash()
        record.config = config.to_dict()
        record.report = report
        logger.debug('saving run %s', run_id)
        return record.save()

    def get_run(self, run_id=None):
        """ the run with run_id, or the only run in the store """
        if run_id is not None:
            return self.runs.objects.get(run_id=run_id)
        runs = self.runs.objects.all().as_list()
        if len(runs) != 1:
            raise ValueError(f'expected a single run in the store, found {len(runs)}, specify run_id')
        return runs[0]

    def save_attack(self, run_id, report):
        self.attacks.objects.find(run_id=run_id, phase=report.phase).delete()
        record = self.attacks(run_id=run_id, phase=report.phase, stages=','.join(report.stages),
                              mean=report.mean if report.applicable else None,
                              report=report.to_dict())
        return record.save()

    def close(self):
        self.db.close()

