"""NumPy implementation of the YOLOv7-AC detector components: ACmix, GAM,
Rep fusion, model assembly, K-means++ anchors and detection metrics."""

__version__ = "0.1.0"
