"""Captioned moment generation, zero-shot temporal grounding and evaluation
on precomputed video frame features."""

from .captionsel import (CaptionedMoment, CmgConfig, ScoredWord, assemble_caption, run_cmg,
                         score_words, select_topk)
from .embed import EmbeddingStore, ProviderConfig, cosine, http_embed, lookup, pool_moment
from .grounding import (EvalReport, GeneratorConfig, Interval, VideoMeta, evaluate,
                        frames_to_interval, ground_query, tiou)
from .lexemes import (Lexicon, Pos, SubtitleWord, WordCandidates, extract_candidates,
                      parse_subtitles, tag_pos_fallback)
from .momentgen import (CandidateSet, Moment, Strategy, augment_with_index, brute_force,
                        kmeans, labels_to_moments, select, sliding_window)
from .tensorio import (PcaModel, pca_fit, pca_transform, read_feature_matrix,
                       uniform_sample_rows, write_feature_matrix)

__version__ = "0.1.0"
