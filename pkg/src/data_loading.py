import logging
import os
import struct

import numpy as np

from core_math import LabeledBatch, l2_normalize_rows
from errors import CheckpointMismatch, DatasetIoError, ShapeMismatch

logger = logging.getLogger(__name__)

DATASET_MAGIC = b'XDS1'
DATASET_HEADER = struct.Struct('<4sQIQ')
CHECKPOINT_MAGIC = b'XCK1'
CHECKPOINT_VERSION = 1
TRAIN_FILE = 'train.xds'
TEST_FILE = 'test.xds'


def make_synthetic(num_classes, samples_per_class, test_samples_per_class, dim, spread, seed):
    """
    Gaussian class clusters on the unit sphere.

    Each class gets a random unit mean; a sample is normalize(mean + spread x
    noise) with noise ~ N(0, I/D), so ``spread`` is the expected noise norm
    relative to the mean. Returns ``(train, test, means)``, rows grouped by
    class.
    """
    rng = np.random.default_rng(seed)
    means = l2_normalize_rows(rng.standard_normal((num_classes, dim)).astype(np.float32))
    per_class = samples_per_class + test_samples_per_class
    noise = rng.standard_normal((num_classes, per_class, dim)).astype(np.float32) / np.float32(np.sqrt(dim))
    samples = means[:, None, :] + np.float32(spread) * noise
    samples = l2_normalize_rows(samples.reshape(-1, dim)).reshape(num_classes, per_class, dim)

    labels = np.repeat(np.arange(num_classes), samples_per_class)
    train = LabeledBatch(samples[:, :samples_per_class].reshape(-1, dim), labels)
    test_labels = np.repeat(np.arange(num_classes), test_samples_per_class)
    test = LabeledBatch(samples[:, samples_per_class:].reshape(-1, dim), test_labels)
    return train, test, means


def write_dataset(filename, batch, num_classes, meta=None):
    """XDS1: magic, N u64, D u32, count u64, f32 features, u32 labels; plus a .meta.txt sidecar."""
    features = np.ascontiguousarray(batch.features, dtype='<f4')
    labels = np.ascontiguousarray(batch.labels, dtype='<u4')
    try:
        with open(filename, 'wb') as f:
            f.write(DATASET_HEADER.pack(DATASET_MAGIC, num_classes, features.shape[1], features.shape[0]))
            f.write(features.tobytes())
            f.write(labels.tobytes())
        meta = dict(meta or {})
        meta.update(num_classes=num_classes, dim=features.shape[1], count=features.shape[0])
        with open(filename + '.meta.txt', 'w') as f:
            f.writelines(f"{k} = {v}\n" for k, v in meta.items())
    except OSError as e:
        raise DatasetIoError(f"cannot write dataset {filename}: {e}") from e
    logger.info("wrote %d samples to %s", features.shape[0], filename)


def read_dataset(filename):
    """Return ``(LabeledBatch, num_classes)``."""
    try:
        with open(filename, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise DatasetIoError(f"cannot read dataset {filename}: {e}") from e
    if len(data) < DATASET_HEADER.size:
        raise DatasetIoError(f"{filename} is too short for a dataset header")
    magic, num_classes, dim, count = DATASET_HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise DatasetIoError(f"{filename} is not an XDS1 dataset (magic {magic!r})")
    expected = DATASET_HEADER.size + count * dim * 4 + count * 4
    if len(data) != expected:
        raise DatasetIoError(f"{filename} is {len(data)} bytes, header promises {expected}")
    features = np.frombuffer(data, dtype='<f4', count=count * dim, offset=DATASET_HEADER.size)
    labels = np.frombuffer(data, dtype='<u4', count=count, offset=DATASET_HEADER.size + count * dim * 4)
    batch = LabeledBatch(features.reshape(count, dim).astype(np.float32), labels.astype(np.int64))
    return batch.check_labels(num_classes), int(num_classes)


def generate_synthetic(cfg, out_dir):
    """Write the train/test split described by ``cfg`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    train, test, _ = make_synthetic(cfg.synthetic_classes, cfg.samples_per_class, cfg.test_samples_per_class,
                                    cfg.feature_dim, cfg.spread, cfg.seed)
    meta = {'seed': cfg.seed, 'spread': cfg.spread}
    paths = {}
    for name, batch in ((TRAIN_FILE, train), (TEST_FILE, test)):
        path = os.path.join(out_dir, name)
        write_dataset(path, batch, cfg.synthetic_classes, meta)
        paths[name] = path
    return paths


def load_dataset(cfg):
    """
    ``(train, test, num_classes)`` from ``cfg.dataset_path`` (a directory
    written by generate_synthetic) or, without one, generated in memory.
    """
    if cfg.dataset_path:
        train, n_train = read_dataset(os.path.join(cfg.dataset_path, TRAIN_FILE))
        test, n_test = read_dataset(os.path.join(cfg.dataset_path, TEST_FILE))
        if n_train != n_test or train.features.shape[1] != test.features.shape[1]:
            raise ShapeMismatch(f"{cfg.dataset_path}: train and test files disagree on N or D")
        if train.features.shape[1] != cfg.feature_dim:
            raise ShapeMismatch(
                f"dataset has D={train.features.shape[1]} but feature_dim={cfg.feature_dim}; "
                f"set feature_dim to match"
            )
        return train, test, n_train
    train, test, _ = make_synthetic(cfg.synthetic_classes, cfg.samples_per_class, cfg.test_samples_per_class,
                                    cfg.feature_dim, cfg.spread, cfg.seed)
    return train, test, cfg.synthetic_classes


def _model_tensors(model):
    tensors = []
    for i, layer in enumerate(model['mlp']):
        tensors.append((f"mlp.{i}.weight", layer['weight']))
        tensors.append((f"mlp.{i}.bias", layer['bias']))
    tensors.append(('fc', model['fc']))
    return tensors


def save_checkpoint(filename, model, cfg_hash):
    """
    XCK1: magic, u32 version, 64-byte config hash, u32 tensor count, then per
    tensor u16 name length, name, u32 ndim, u64 dims, f32 data.
    """
    tensors = _model_tensors(model)
    try:
        with open(filename, 'wb') as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack('<I', CHECKPOINT_VERSION))
            f.write(cfg_hash.encode('ascii').ljust(64, b'\0')[:64])
            f.write(struct.pack('<I', len(tensors)))
            for name, arr in tensors:
                raw = name.encode('utf-8')
                arr = np.ascontiguousarray(arr, dtype='<f4')
                f.write(struct.pack('<H', len(raw)) + raw)
                f.write(struct.pack('<I', arr.ndim))
                f.write(struct.pack(f'<{arr.ndim}Q', *arr.shape))
                f.write(arr.tobytes())
    except OSError as e:
        raise DatasetIoError(f"cannot write checkpoint {filename}: {e}") from e
    logger.info("checkpoint written to %s", filename)


def load_checkpoint(filename, expected_hash=None):
    """Return ``(model, cfg_hash)``; raise CheckpointMismatch when hashes differ."""
    try:
        with open(filename, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise DatasetIoError(f"cannot read checkpoint {filename}: {e}") from e
    if data[:4] != CHECKPOINT_MAGIC:
        raise DatasetIoError(f"{filename} is not an XCK1 checkpoint")
    try:
        (version,) = struct.unpack_from('<I', data, 4)
        if version != CHECKPOINT_VERSION:
            raise DatasetIoError(f"{filename}: unsupported checkpoint version {version}")
        cfg_hash = data[8:72].rstrip(b'\0').decode('ascii')
        (count,) = struct.unpack_from('<I', data, 72)
        pos = 76
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from('<H', data, pos)
            name = data[pos + 2:pos + 2 + name_len].decode('utf-8')
            pos += 2 + name_len
            (ndim,) = struct.unpack_from('<I', data, pos)
            shape = struct.unpack_from(f'<{ndim}Q', data, pos + 4)
            pos += 4 + 8 * ndim
            size = int(np.prod(shape))
            tensors[name] = np.frombuffer(data, dtype='<f4', count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except (struct.error, ValueError) as e:
        raise DatasetIoError(f"{filename} is truncated or corrupt: {e}") from e
    if expected_hash is not None and cfg_hash != expected_hash:
        raise CheckpointMismatch(
            f"{filename} was written for another model configuration "
            f"(hash {cfg_hash[:12]}, expected {expected_hash[:12]})"
        )
    layers = sorted({int(name.split('.')[1]) for name in tensors if name.startswith('mlp.')})
    model = {
        'mlp': [{'weight': tensors[f"mlp.{i}.weight"], 'bias': tensors[f"mlp.{i}.bias"]} for i in layers],
        'fc': tensors['fc'],
    }
    return model, cfg_hash
