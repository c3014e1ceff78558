"""
Simulator images: depth, tags and crops
=======================================

Depth is packed into 24 bits across R, G and B. Semantic tags live in the
red channel and we keep only road and vehicle. Sky and hood rows are
cropped away before training.
"""
import numpy as np

from laneseg import datapipe as dp

depth_px = np.array([[[0, 0, 0], [0, 0, 128], [255, 255, 255]]], np.uint8)
print("depth (m):", dp.decode_depth(depth_px)[0])
print("re-encoded:", dp.encode_depth(dp.decode_depth(depth_px))[0].tolist())

raw = np.zeros((600, 800, 3), np.uint8)
raw[300:, :, 0] = 7       # road tag
raw[350:400, 100:200, 0] = 10  # vehicle tag
raw[:100, :, 0] = 3       # something we do not keep
labels = dp.decode_labels(dp.crop(raw))
print("cropped label image:", labels.shape, "class counts", np.bincount(labels.ravel(), minlength=3))

colors = dp.encode_label_colors(labels)
assert (dp.decode_label_colors(colors) == labels).all()
print("colours used:", np.unique(colors.reshape(-1, 3), axis=0).tolist())

# augmentation: rotate and shift move image and labels together
img, lab = dp.synthetic_road(64, 64, np.random.default_rng(2))
r_img, r_lab = dp.rotate(img, lab, 20.0)
s_img, s_lab = dp.shift(img, lab, 6, 12)
print("after rotation, classes present:", np.unique(r_lab), "after shift:", np.unique(s_lab))
