"""Online hand-eye calibration from instrument keypoints."""
