"""Error types raised by the training system.

Every error carries a stable ``code`` so the command-line driver can print a
machine-readable failure line.
"""


class XknnError(Exception):
    """Base class for all errors raised by this package."""

    code = "xknn_error"


class ShapeMismatch(XknnError, ValueError):
    code = "shape_mismatch"


class ZeroNormRow(XknnError, ValueError):
    code = "zero_norm_row"

    def __init__(self, row_index, norm=0.0):
        self.row_index = int(row_index)
        self.norm = float(norm)
        super().__init__(f"row {self.row_index} has norm {self.norm:.3e} below epsilon")


class LabelOutOfRange(XknnError, ValueError):
    code = "label_out_of_range"

    def __init__(self, label, num_classes):
        self.label = int(label)
        self.num_classes = int(num_classes)
        super().__init__(f"label {self.label} outside [0, {self.num_classes})")


class KTooLarge(XknnError, ValueError):
    code = "k_too_large"

    def __init__(self, k, limit):
        self.k = int(k)
        self.limit = int(limit)
        super().__init__(f"k={self.k} exceeds the available {self.limit} entries")


class InvalidParameter(XknnError, ValueError):
    code = "invalid_parameter"


class EmptyShard(XknnError, ValueError):
    code = "empty_shard"

    def __init__(self, shard):
        self.shard = int(shard)
        super().__init__(f"shard {self.shard} owns no classes")


class LabelNotActive(XknnError, ValueError):
    code = "label_not_active"

    def __init__(self, label):
        self.label = int(label)
        super().__init__(f"label {self.label} is not in the active class set")


class MTooSmall(XknnError, ValueError):
    code = "m_too_small"

    def __init__(self, m_active, distinct_labels):
        self.m_active = int(m_active)
        self.distinct_labels = int(distinct_labels)
        super().__init__(
            f"m_active={self.m_active} cannot hold the {self.distinct_labels} distinct batch labels"
        )


class ChannelOrderError(XknnError, RuntimeError):
    code = "channel_order"


class ConfigError(XknnError, ValueError):
    code = "config_error"


class DatasetIoError(XknnError, OSError):
    code = "io_error"


class GraphFormatError(XknnError, ValueError):
    code = "graph_format"


class CheckpointMismatch(XknnError, ValueError):
    code = "checkpoint_mismatch"
