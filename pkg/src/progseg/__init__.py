"""Progressive query aggregation for 3D instance segmentation."""
