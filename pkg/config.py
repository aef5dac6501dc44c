"""Configuration settings for the radar odometry pipeline."""

import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def _env_int(name, default):
    return int(os.getenv(name, default))


def _env_float(name, default):
    return float(os.getenv(name, default))


class Config:
    """Configuration class for the radar odometry pipeline."""

    # Paths
    DATA_PATH = os.getenv('RADAR_ODOM_DATA_PATH', './data')
    OUTPUT_PATH = os.getenv('RADAR_ODOM_OUTPUT_PATH', './runs')
    CHECKPOINT_PATH = os.getenv('RADAR_ODOM_CHECKPOINT_PATH', './runs/checkpoint')

    # Logging
    LOG_LEVEL = os.getenv('RADAR_ODOM_LOG_LEVEL', 'INFO')
    LOG_FILE = os.getenv('RADAR_ODOM_LOG_FILE', 'radar_odometry.log')

    SEED = _env_int('RADAR_ODOM_SEED', 0)

    # Preprocessing
    NUM_POINTS = _env_int('RADAR_ODOM_NUM_POINTS', 512)
    MIN_HEIGHT = -2.0
    MAX_HEIGHT = 10.0

    # Backbone
    SA_RADII = (0.5, 1.0, 2.0, 4.0)
    SA_MAX_SAMPLES = 16
    SA_WIDTH = 16
    EMBED_WIDTH = 64
    FEATURE_WIDTH = 128
    NUM_CLUSTERS = 8
    CENTER_NEIGHBORS = 8

    # Correlation lookup
    LOOKUP_K1 = 8
    LOOKUP_K2 = 4
    LOOKUP_HEADS = 4
    LOOKUP_HIDDEN = 32

    # Iteration operator
    HIDDEN_WIDTH = 64
    FLOW_WIDTH = 32
    HEAD_WIDTH = 64
    CONFIDENCE_MODE = os.getenv('RADAR_ODOM_CONFIDENCE_MODE', 'per_axis')
    POSE_HEAD = os.getenv('RADAR_ODOM_POSE_HEAD', 'amba')
    DAMPING = _env_float('RADAR_ODOM_DAMPING', 1e-6)
    MAX_DAMPING = 1e-2
    DAMPING_FACTOR = 10.0
    MIN_DIAGONAL = 1e-6

    # Sliding-window schedule
    WINDOW_SIZE = _env_int('RADAR_ODOM_WINDOW', 8)
    INIT_ITERATIONS = 12
    TRACK_ITERATIONS = _env_int('RADAR_ODOM_ITERS', 4)
    BA_STEPS = 2
    EDGE_RADIUS = 2
    TRAIN_FRAMES = 7
    TRAIN_NEIGHBORS = 3
    TRAIN_UNROLL = 15

    # Training
    LEARNING_RATE = 2e-4
    LR_DECAY = 0.1
    SCHEDULE_EPOCHS = 30
    SCHEDULE_DECAY_EVERY = 10

    # ICP baseline
    ICP_MAX_ITERATIONS = 50
    ICP_TOLERANCE = 1e-10
    ICP_MAX_DISTANCE = 2.0

    # Evaluation
    METRIC_MODE = os.getenv('RADAR_ODOM_METRIC_MODE', 'vod')
    VOD_LENGTHS = tuple(range(20, 161, 20))
    LONG_LENGTHS = tuple(range(100, 801, 100))

    @classmethod
    def validate(cls):
        """Validate that all settings are usable."""
        positive_ints = [
            'NUM_POINTS',
            'SA_MAX_SAMPLES',
            'NUM_CLUSTERS',
            'CENTER_NEIGHBORS',
            'LOOKUP_K1',
            'LOOKUP_K2',
            'WINDOW_SIZE',
            'INIT_ITERATIONS',
            'TRACK_ITERATIONS',
            'BA_STEPS',
            'EDGE_RADIUS',
            'TRAIN_UNROLL',
        ]

        invalid = []
        for name in positive_ints:
            value = getattr(cls, name)
            if not isinstance(value, int) or value <= 0:
                invalid.append(name)

        if cls.MIN_HEIGHT >= cls.MAX_HEIGHT:
            invalid.append('MIN_HEIGHT/MAX_HEIGHT')
        if cls.METRIC_MODE not in ('vod', 'long'):
            invalid.append('METRIC_MODE')
        if cls.CONFIDENCE_MODE not in ('per_axis', 'per_point', 'none'):
            invalid.append('CONFIDENCE_MODE')
        if cls.POSE_HEAD not in ('amba', 'flow_supervised', 'direct_regression'):
            invalid.append('POSE_HEAD')
        if cls.DAMPING < 0:
            invalid.append('DAMPING')

        if invalid:
            raise ValueError(f"Invalid configuration values: {', '.join(invalid)}")

        return True
