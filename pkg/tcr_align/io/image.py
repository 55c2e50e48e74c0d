import io
import numpy as np
import os
import torch
from PIL import Image

from ..core.features import GrayImage, to_gray
from ..errors import EmptyImage, MissingFile
from ..utils import put


def load_image(path: str) -> GrayImage:
    """
    Decode an 8-bit PNG or JPEG into a gray image. Single-channel files are used as stored,
    color files go through the luminance conversion.
    """
    if not os.path.isfile(path):
        raise MissingFile(f'Image file {path} does not exist')
    try:
        with Image.open(path) as image:
            image.load()
            if image.mode == 'L':
                return GrayImage(torch.from_numpy(np.asarray(image, dtype=np.float64)) / 255.0)
            array = np.asarray(image.convert('RGB'), dtype=np.uint8)
    except (OSError, SyntaxError) as e:
        raise EmptyImage(f'Cannot decode image {path}: {e}')
    return to_gray(torch.from_numpy(array.copy()))


def save_png(path: str, image: GrayImage) -> None:
    # Intensities are quantized to 8 bits
    array = torch.round(image.pixels * 255.0).to(torch.uint8).numpy()
    buffer = io.BytesIO()
    Image.fromarray(array).save(buffer, format='PNG')
    put(path, buffer.getvalue(), is_binary=True)
