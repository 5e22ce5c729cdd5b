from .common import *
from .worker import *
from .config import *
from .dataset import *
from .synthesis import *
from .backbone import *
from .losses import *
from .seg_head import *
from .metrics import *
from .checkpoint import *
from .trainer import *
from .inference import *
from .toy import *
