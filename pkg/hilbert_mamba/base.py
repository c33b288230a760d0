import json


class HilbertMambaError(Exception):
    pass


class DimensionError(HilbertMambaError):
    pass


class ParameterError(HilbertMambaError):
    pass


class NumericError(HilbertMambaError):
    pass


class ContractError(HilbertMambaError):
    pass


class StateError(HilbertMambaError):
    pass


class FormatError(HilbertMambaError):
    pass


class ObjectDoesNotExist(HilbertMambaError):
    pass


class MultipleObjectsReturned(HilbertMambaError):
    pass


def first(items):
    return items[0] if items else None


def as_tuple(value, n, name='value'):
    '''Expand an int to an n-tuple, or check that a sequence has length n'''
    if isinstance(value, int):
        return (value,) * n
    value = tuple(int(v) for v in value)
    if len(value) != n:
        raise ParameterError(
            '{0} must have {1} entries, got {2!r}'.format(name, n, value))
    return value


class Record(object):
    '''An object backed by a dict of JSON-compatible data

    The dict is kept as-is so a record can be written back to a
    manifest without loss; properties on subclasses give typed access
    to the fields.'''

    def __init__(self, data, owner):
        self.data = data
        self.owner = owner

    @property
    def key_for_hash(self):
        return json.dumps(self.data, sort_keys=True)

    def __eq__(self, other):
        if isinstance(other, self.__class__):
            return self.data == other.data
        return NotImplemented

    def __hash__(self):
        return hash(self.key_for_hash)

    def repr_helper(self, enclosed_text):
        return '<{0}: {1}>'.format(type(self).__name__, enclosed_text)


class RecordCollection(object):

    def __init__(self, data_list, object_class, owner):
        self.owner = owner
        self.object_class = object_class
        self.object_list = [object_class(data, owner) for data in data_list]

    def __len__(self):
        return len(self.object_list)

    def __getitem__(self, index):
        return self.object_list[index]

    def __iter__(self):
        return iter(self.object_list)

    @property
    def first(self):
        return first(self.object_list)

    def filter(self, **kwargs):
        '''Records whose attributes equal every keyword value'''
        return self.__class__(
            [o.data for o in self.object_list
             if all(getattr(o, k) == v for k, v in kwargs.items())],
            self.owner)

    def get(self, **kwargs):
        matches = self.filter(**kwargs)
        n = len(matches)
        if n == 0:
            msg = "No {0} found matching {1}"
            raise self.object_class.DoesNotExist(msg.format(
                self.object_class.__name__, kwargs))
        elif n > 1:
            msg = "Multiple {0} objects ({1}) found matching {2}"
            raise self.object_class.MultipleObjectsReturned(msg.format(
                self.object_class.__name__, n, kwargs))
        return matches[0]
