import hashlib
import os
from typing import Any, Callable, Dict, Optional, Sequence

from ..utils import hash_to_hex


def samples_digest(samples: Sequence[Any]) -> str:
    """
    Content digest of training samples: names, annotations, boxes and image pixels, in order.
    Two sample lists with the same digest train the same model under the same config.
    """
    digest = hashlib.sha256()
    for sample in samples:
        digest.update(sample.name.encode('utf-8'))
        digest.update(sample.truth.schema.name.encode('utf-8'))
        digest.update(sample.truth.coords.contiguous().numpy().tobytes())
        digest.update(repr(sample.bbox.as_tuple()).encode('utf-8'))
        pixels = sample.load_image().pixels
        digest.update(repr(tuple(pixels.shape)).encode('utf-8'))
        digest.update(pixels.contiguous().numpy().tobytes())
    return digest.hexdigest()


class ModelCache:
    """
    Trained models keyed by `(name, sorted keys)`, optionally mirrored on disk under `TCR_CACHE_DIR`.
    """

    def __init__(self, cache_dir: Optional[str] = None) -> None:
        self.models = {}
        self.cache_dir = cache_dir if cache_dir is not None else os.getenv('TCR_CACHE_DIR', None)

    @staticmethod
    def signature(name: str, keys: Dict[str, Any]) -> tuple:
        keys = {k: keys[k] for k in sorted(keys.keys())}
        return name, f'{keys}'

    def path_of(self, signature: tuple) -> Optional[str]:
        if not self.cache_dir:
            return None
        return os.path.join(self.cache_dir, f'{signature[0]}_{hash_to_hex(signature[1])}.tcr')

    def __contains__(self, signature: tuple) -> bool:
        return signature in self.models

    def get_or_train(self, name: str, keys: Dict[str, Any], train: Callable[[], Any]) -> Any:
        # NOTES: `train` must be a pure function of `keys`
        from ..io.model_file import load_model, save_model

        signature = self.signature(name, keys)
        if signature in self.models:
            if os.getenv('TCR_DEBUG', None):
                print(f'Using cached model {name} with keys {signature[1]}')
            return self.models[signature]

        path = self.path_of(signature)
        if path is not None and os.path.exists(path):
            if os.getenv('TCR_DEBUG', None):
                print(f'Loading cached model {name} from {path}')
            self.models[signature] = load_model(path)
            return self.models[signature]

        if os.getenv('TCR_DEBUG', None):
            print(f'Training model {name} with keys {signature[1]}')
        model = train()
        self.models[signature] = model
        if path is not None:
            os.makedirs(self.cache_dir, exist_ok=True)
            save_model(model, path)
        return model
