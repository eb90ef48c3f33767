from .adapt import AdaptState
from .spd_agent import SpdAgent
