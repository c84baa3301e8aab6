"""Warning Propagation on multi-type random graphs."""
from . import (alphabet, change_process, degree_model, dist_fixed_point, ghat_model, graph_model, gw_tree,
               instances, wp_engine)
from .alphabet import MessageAlphabet, UpdateRule, binary_alphabet, make_rule
from .degree_model import DegreeModel
from .dist_fixed_point import HistoryDistMatrix, ProbDistMatrix, iterate_to_limit
from .errors import DomainError, NumericError, ResourceError
from .graph_model import TypedGraph
from .instances import InstanceBundle, instance_from_config
from .wp_engine import MessagedGraph, initialize, run

__version__ = "0.1.0"
