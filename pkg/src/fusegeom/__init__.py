"""LiDAR/camera fusion geometry: projection, joint anchors, coupling losses,
pseudo-LiDAR densification and detection evaluation."""

from .anchors import (AnchorLabel, AnchorTemplate, JointAnchor, RegressionTargets2D, RegressionTargets3D,
                      assign_proposals, decode_2d, decode_3d, encode_2d, encode_3d, joint_filter,
                      label_2d_anchors, seed_anchors, select_top_k)
from .boxes import (Box2D, Box3D, box3d_corners, canonical_transform, iou_2d, iou_3d, iou_bev, nms_rotated,
                    project_box3d_to_box2d)
from .calib import (Calibration, ImagePoint, image_to_rect, parse_kitti_calib, project_velo_to_image,
                    rect_to_velo, velo_to_rect)
from .evaluation import Detection, Difficulty, GroundTruth, compute_ap, count_mispredicted, recall_at_k
from .losses import (LossConfig, bce_seg_loss, focal_loss, reprojection_loss, smooth_l1,
                     total_regression_loss)
from .pointcloud import Frame, PointCloud
from .pseudolidar import (DisparityMap, RectificationResult, crop_points_by_box2d, crop_points_by_box3d,
                          disparity_to_points, range_crop, rectify_depth, statistical_filter)

__version__ = "0.1.0"
