MODEL_FORMAT_VERSION = 1

GRAPH_FORMAT_VERSION = 1

DEFAULT_MODEL_FILENAME = "model.json"

DEFAULT_BLOCK_SIZE = 1024

# Float format for every number we persist: 17 significant digits round-trip binary64 exactly.
FLOAT_FORMAT = ".16e"

W_HEAD_INIT_OFFSET = 0.1
