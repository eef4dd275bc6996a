import warnings

warnings.filterwarnings("ignore", message=".*TBB.*")
