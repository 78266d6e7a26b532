"""Evidence retrieval, generative re-ranking, and claim verification."""

from .corpus import (
    AnnotationLevel,
    Claim,
    Corpus,
    EvidenceDoc,
    ImageRef,
    Modality,
    RelevanceAnnotation,
    Sentence,
    VerdictLabel,
    collapse_factify_labels,
    load_annotations,
    load_claims,
    load_corpus,
    segment_document,
)
from .index import (
    EmbeddingRecord,
    RankedCandidate,
    RetrievalConfig,
    Space,
    VectorIndex,
    cosine,
    load_embeddings,
    retrieve_image,
    retrieve_text,
)
from .metrics import (
    ClassificationMetrics,
    RetrievalMetrics,
    average_precision_at_k,
    classification_report,
    evaluate_with_annotations,
    map_at_k,
    precision_recall_at_k,
)
from .oracle import (
    HttpOracle,
    MockOracle,
    Oracle,
    OracleRequest,
    OracleResponse,
    PromptTemplate,
    TokenClassName,
    build_relevance_prompt,
    make_response,
)
from .rerank import (
    RerankConfig,
    RerankedCandidate,
    Strategy,
    classify_gais_all,
    classify_gais_yn,
    classify_gais_yno,
    relevance_score,
    rerank,
    rerank_gais,
    rerank_irs,
)
from .verify import (
    EvidencePair,
    PairModality,
    Verdict,
    Vote,
    form_pairs,
    majority_vote,
    verify_one_level,
    verify_two_level,
)

__version__ = "0.1.0"
