from __future__ import annotations

import numpy as np
import pytest
import torch
from pydicom.dataset import Dataset, FileMetaDataset
from pydicom.uid import ExplicitVRLittleEndian, SecondaryCaptureImageStorage, generate_uid

torch.set_num_threads(1)


def write_dicom(path, pixels: np.ndarray, photometric="MONOCHROME2", slope=1.0, intercept=0.0, frames=1, samples=1):
    """Minimal uncompressed DICOM for ingestion tests."""
    meta = FileMetaDataset()
    meta.MediaStorageSOPClassUID = SecondaryCaptureImageStorage
    meta.MediaStorageSOPInstanceUID = generate_uid()
    meta.TransferSyntaxUID = ExplicitVRLittleEndian

    ds = Dataset()
    ds.file_meta = meta
    ds.SOPClassUID = SecondaryCaptureImageStorage
    ds.SOPInstanceUID = meta.MediaStorageSOPInstanceUID
    arr = np.asarray(pixels, dtype=np.uint16)
    if frames > 1:
        ds.NumberOfFrames = frames
        rows, cols = arr.shape[-2:]
    elif samples > 1:
        rows, cols = arr.shape[:2]
        ds.PlanarConfiguration = 0
    else:
        rows, cols = arr.shape
    ds.Rows, ds.Columns = rows, cols
    ds.SamplesPerPixel = samples
    ds.PhotometricInterpretation = photometric if samples == 1 else "RGB"
    ds.BitsAllocated = 16
    ds.BitsStored = 16
    ds.HighBit = 15
    ds.PixelRepresentation = 0
    ds.RescaleSlope = slope
    ds.RescaleIntercept = intercept
    ds.PixelData = arr.tobytes()
    ds.save_as(path, enforce_file_format=True)
    return path


@pytest.fixture
def dicom_writer(tmp_path):
    counter = iter(range(10_000))

    def _write(pixels, **kw):
        return write_dicom(tmp_path / f"scan_{next(counter)}.dcm", pixels, **kw)

    return _write
