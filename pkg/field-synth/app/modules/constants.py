TOOL_VERSION = "0.1.0"

# Segmentation class order is fixed: background is an explicit fourth class
CLASS_INDEX = {
    "background": 0,
    "wm": 1,
    "gm": 2,
    "csf": 3,
}
CLASS_NAMES = tuple(CLASS_INDEX.keys())
NUM_CLASSES = len(CLASS_NAMES)

# Tissues that take part in the contrast model (background excluded)
TISSUES = ("wm", "gm", "csf")

# Contrast pairs in the row order of the contrast system: (WM, CSF), (WM, GM), (GM, CSF)
CONTRAST_PAIRS = {
    "c_wc": ("wm", "csf"),
    "c_wg": ("wm", "gm"),
    "c_gc": ("gm", "csf"),
}

# Background noise in magnitude images is Rayleigh distributed
RAYLEIGH_CORRECTION = 1.53

# Lattice objective values within this fraction of the problem scale are treated as equal
TIE_TOLERANCE = 1e-12

# Rician noise parameters are given on an 8-bit intensity scale
NOISE_INTENSITY_SCALE = 255.0

# Background voxels within this many ULF voxels of tissue are left out of the noise floor
NOISE_FLOOR_EROSION = 2

NIFTI = {
    "header_size": 348,
    "vox_offset": 352,
    "single_file_magic": b"n+1",
    "pair_magic": b"ni1",
    "supported_dtypes": ("uint8", "int8", "int16", "uint16", "int32", "uint32", "float32", "float64"),
}

EXIT_CODES = {
    "success": 0,
    "runtime_failure": 1,
    "bad_input": 2,
}

LOSS_HISTORY_COLUMNS = ["iteration", "total", "mae", "seg", "tv", "preact"]

METRIC_COLUMNS = [
    "ssim",
    "mslc",
    "wm_gm_contrast",
    "edge_f1",
    "dice_mean",
    "iou_mean",
    "rqs",
]

SENSITIVITY_COLUMNS = [
    "cell_id",
    "seed",
    "repeat",
    "c_wc",
    "c_wg",
    "c_gc",
    "noise_rho",
    "noise_sigma",
    "m_wm",
    "m_gm",
    "m_csf",
    "achieved_c_wg",
    "ssim",
    "mslc",
    "wm_gm_contrast",
    "edge_f1",
    "dice_mean",
    "iou_mean",
    "trilinear_ssim",
    "trilinear_wm_gm_contrast",
    "bicubic_ssim",
    "bicubic_wm_gm_contrast",
    "status",
]

TUNE_COLUMNS = ["cell_id", "l1", "l2", "l3", "l4", "ssim", "mslc", "dice_mean", "iou_mean", "rqs", "status"]
