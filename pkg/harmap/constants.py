import enum

GEOMETRY_VERSION = "harmap-geometry/1"
SOLUTION_VERSION = "harmap-solution/1"

EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_CONVERGENCE_ERROR = 3
EXIT_NUMERICAL_ERROR = 4

# Knots closer than this are treated as equal when merging or refining
KNOT_TOLERANCE = 1e-12

# Boundary curves sharing an endpoint must agree to this tolerance
ENDPOINT_TOLERANCE = 1e-10

# Frame vectors with a smaller cross product are considered parallel
PARALLEL_TOLERANCE = 1e-10

# Tangent vectors shorter than this cannot be normalised
TANGENT_TOLERANCE = 1e-14


class Edge(enum.IntEnum):
    """Local edges of the reference square, vertices numbered counterclockwise from (0, 0)"""
    south = 0
    east = 1
    north = 2
    west = 3


class Scheme(str, enum.Enum):
    c0dg = "c0dg"
    hessian = "hessian"
    rotfree = "rotfree"
    weakform = "weakform"
    winslow = "winslow"


class Linearisation(str, enum.Enum):
    fixed_point = "fixed-point"
    newton = "newton"


class ReparamMode(str, enum.Enum):
    interface_removal = "interface-removal"
    homogenise_sigma = "homogenise-sigma"
    homogenise_omega = "homogenise-omega"
    adapt = "adapt"
    boundary_orth = "boundary-orth"
    boundary_layer = "boundary-layer"
    boundary_layer_orth = "boundary-layer-orth"


class OrthVariant(str, enum.Enum):
    q = "q"
    t = "t"


class TargetDomain(str, enum.Enum):
    polygon = "polygon"
    unit_disc = "unit_disc"


class MonitorKind(str, enum.Enum):
    ring = "ring"
    gaussian = "gaussian"


# Patch vertex ids spanning each edge, ordered along increasing edge parameter
EDGE_VERTICES = {
    Edge.south: (0, 1),
    Edge.east: (1, 2),
    Edge.north: (3, 2),
    Edge.west: (0, 3),
}

# Reference coordinate held constant along the edge, and its value
EDGE_FIXED_AXIS = {Edge.south: 1, Edge.east: 0, Edge.north: 1, Edge.west: 0}
EDGE_FIXED_VALUE = {Edge.south: 0.0, Edge.east: 1.0, Edge.north: 1.0, Edge.west: 0.0}

# +1 if the edge parameter runs counterclockwise around the patch
EDGE_CCW = {Edge.south: 1, Edge.east: 1, Edge.north: -1, Edge.west: -1}

# Sign of the transverse reference derivative pointing out of the patch
EDGE_OUTWARD = {Edge.south: -1, Edge.east: 1, Edge.north: 1, Edge.west: -1}

# Orientation preserving maps mu -> (tau, nu) = R @ mu + c that move the given edge onto nu = 1
BOUNDARY_FRAMES = {
    Edge.north: (((1.0, 0.0), (0.0, 1.0)), (0.0, 0.0)),
    Edge.south: (((-1.0, 0.0), (0.0, -1.0)), (1.0, 1.0)),
    Edge.east: (((0.0, -1.0), (1.0, 0.0)), (1.0, 0.0)),
    Edge.west: (((0.0, 1.0), (-1.0, 0.0)), (0.0, 1.0)),
}
