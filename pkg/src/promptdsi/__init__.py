"""Classification-based differentiable search index with rehearsal-free
prompt-based continual indexing, implemented on numpy with analytic
gradients throughout."""

from .data import CorpusTimeline, SyntheticSpec, generate_corpora, load_jsonl, save_jsonl
from .encoder import EncoderConfig, EncoderState, PassCounter, PrefixSet, avg_at_layer, encoder_forward
from .metrics import PerfMatrix, cl_metrics, hits_at_k, memory_accounting, mrr_at_k, params_accounting
from .numerics import AdamW, adamw_step, check_gradients, cosine_distance, cross_entropy_logits
from .prompts import PoolConfig, PromptPool, allocate_for_timestep, coda_compose, select_topn, utilization_stats
from .retrieval import Classifier, DocidRegistry, DsiModel, dsi_loss, expand_classifier, score_and_rank
from .topics import TopicModel, ctfidf_terms, kmeans, mine_topics, topic_keys
from .continual import TimestepPlan, PhaseSettings, run_schedule

__version__ = "0.1.0"

__all__ = [
    "AdamW", "Classifier", "CorpusTimeline", "DocidRegistry", "DsiModel",
    "EncoderConfig", "EncoderState", "PassCounter", "PerfMatrix", "PhaseSettings",
    "PoolConfig", "PrefixSet", "PromptPool", "SyntheticSpec", "TimestepPlan",
    "TopicModel", "adamw_step", "allocate_for_timestep", "avg_at_layer",
    "check_gradients", "cl_metrics", "coda_compose", "cosine_distance",
    "cross_entropy_logits", "ctfidf_terms", "dsi_loss", "encoder_forward",
    "expand_classifier", "generate_corpora", "hits_at_k", "kmeans", "load_jsonl",
    "memory_accounting", "mine_topics", "mrr_at_k", "params_accounting",
    "run_schedule", "save_jsonl", "score_and_rank", "select_topn", "topic_keys",
    "utilization_stats",
]
