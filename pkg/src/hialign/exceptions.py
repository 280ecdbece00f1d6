"""Error taxonomy.

ContractError covers misuse of an API (bad shapes, duplicate names, invalid
config); DataError covers malformed external inputs (manifests, lexicon or
embedding files, tensor blobs); NonFiniteError is raised by nan-check mode
and by the training-divergence guard.
"""


class HialignError(Exception):
    pass


class ContractError(HialignError):
    pass


class DataError(HialignError):
    pass


class NonFiniteError(HialignError):
    pass
