from .candidates import (
    CandidateProvider,
    GPT2CandidateProvider,
    StaticSynonymProvider,
    candidates,
)
from .prompts import (
    DEFAULT_PROMPT,
    TextFeatureCache,
    build_head,
    build_text_input,
    masked_prompt,
    parse_text_input,
)
from .saliency import (
    DefenseResult,
    PromptScorer,
    defend,
    random_prompt,
    replace_token,
    resolve_threshold,
    saliency,
    select_update_set,
    wrong_labels,
)

__all__ = [
    "CandidateProvider",
    "DEFAULT_PROMPT",
    "DefenseResult",
    "GPT2CandidateProvider",
    "PromptScorer",
    "StaticSynonymProvider",
    "TextFeatureCache",
    "build_head",
    "build_text_input",
    "candidates",
    "defend",
    "masked_prompt",
    "parse_text_input",
    "random_prompt",
    "replace_token",
    "resolve_threshold",
    "saliency",
    "select_update_set",
    "wrong_labels",
]
