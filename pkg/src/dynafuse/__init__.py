"""Camera/LiDAR BEV fusion with domain alignment, modal interaction,
specialty-aware dynamic fusion and instance-adaptive losses, at desk scale."""

__version__ = "0.1.0"
