"""Regenerate the external-tool NIfTI fixtures (needs nibabel; not a test
dependency).  The expected voxel values are frozen in test_volume_io.py."""
import nibabel as nib
import numpy as np

affine = np.array([[2.0, 0, 0, -3.0], [0, 1.5, 0, 4.0], [0, 0, 3.0, 10.0], [0, 0, 0, 1]])

img = nib.Nifti1Image((np.arange(64, dtype=np.float32).reshape(4, 4, 4) * 0.5 - 3.0), affine)
img.set_sform(affine, code=1)
nib.save(img, "nibabel_float32.nii")

lab = nib.Nifti1Image((np.arange(60).reshape(3, 4, 5) % 4).astype(np.uint8), affine)
nib.save(lab, "nibabel_uint8.nii")

hdr = nib.Nifti1Header(endianness=">")
hdr.set_data_dtype(">i2")
big = nib.Nifti1Image((np.arange(24).reshape(2, 3, 4) * 100 - 1000).astype(">i2"), np.eye(4), header=hdr)
nib.save(big, "nibabel_int16_be.nii")

scaled = nib.Nifti1Image(np.arange(8, dtype=np.int16).reshape(2, 2, 2), np.eye(4))
scaled.header.set_slope_inter(0.5, 10.0)
nib.save(scaled, "nibabel_int16_scaled.nii")
