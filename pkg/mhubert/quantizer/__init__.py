from .hnsw import (
    HnswGraph,
    build_hnsw,
    hnsw_search,
    hnsw_search_batch,
    recall_at_1,
)
from .index import (
    Index,
    IndexConfig,
    index_assign,
    load_index,
    parse_index_config,
    read_index,
    save_index,
    train_index,
    write_index,
)
from .kmeans import KMeansModel, assign_exhaustive, train_kmeans
from .opq import OpqRotation, train_opq
from .pq import (
    PqCodebook,
    pq_decode,
    pq_encode,
    pq_pack,
    pq_reconstruction_error,
    pq_unpack,
    train_pq,
)
