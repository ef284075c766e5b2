import hashlib
import json
from typing import Dict, List, Sequence, Tuple

from App.core.errors import MalformedPromptError, VocabularyError
from App.models.schemas import PATTERNS

COLOR_NAMES: Tuple[str, ...] = ("red", "orange", "yellow", "green", "blue", "purple", "black", "white")
CLASS_COLORS: Dict[str, Tuple[int, ...]] = {
    "warm": (0, 1, 2),
    "cool": (3, 4, 5),
    "any": tuple(range(8)),
}
FILLER_WORDS: Tuple[str, ...] = ("a", "the", "of", "with", "image", "scene", "picture", "in")


class Vocabulary:
    """
    Dense, run-stable id assignment for both token spaces.

    Image tokens are the 8 colors (0..7). Prompt tokens are, in order:
    pad, bos, the 8 color words, the class words, the pattern words and
    the filler words, 24 ids in total.
    """

    def __init__(self):
        self.image_tokens: Tuple[str, ...] = COLOR_NAMES
        self.prompt_tokens: Tuple[str, ...] = (
            ("<pad>", "<bos>") + COLOR_NAMES + tuple(CLASS_COLORS) + PATTERNS + FILLER_WORDS
        )
        self.word_to_id: Dict[str, int] = {w: i for i, w in enumerate(self.prompt_tokens)}
        self.pad_id = self.word_to_id["<pad>"]
        self.bos_id = self.word_to_id["<bos>"]
        # Image-side bos used only as a teacher-forcing input
        self.image_bos_id = len(self.image_tokens)

    @property
    def n_image(self) -> int:
        return len(self.image_tokens)

    @property
    def n_prompt(self) -> int:
        return len(self.prompt_tokens)

    @property
    def hash(self) -> str:
        payload = json.dumps({"image": self.image_tokens, "prompt": self.prompt_tokens}, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def is_color_word(self, token: int) -> bool:
        return 0 <= token - self.word_to_id["red"] < len(COLOR_NAMES)

    def is_class_word(self, token: int) -> bool:
        return token in (self.word_to_id[w] for w in CLASS_COLORS)

    def is_pattern_word(self, token: int) -> bool:
        return token in (self.word_to_id[p] for p in PATTERNS)

    def admissible_colors(self, token: int) -> Tuple[int, ...]:
        """Colors admitted by a color word or a class word."""
        if self.is_color_word(token):
            return (token - self.word_to_id["red"],)
        if self.is_class_word(token):
            return CLASS_COLORS[self.prompt_tokens[token]]
        raise VocabularyError(f"Token {token} is neither a color word nor a class word")

    def validate_prompt(self, tokens: Sequence[int]) -> None:
        """Check the fixed 4-slot layout (bos, color-or-class, pattern, pad)."""
        tokens = [int(t) for t in tokens]
        if len(tokens) != 4:
            raise MalformedPromptError(min(len(tokens), 4), f"expected 4 tokens, got {len(tokens)}")
        if tokens[0] != self.bos_id:
            raise MalformedPromptError(0, f"expected <bos> ({self.bos_id}), got {tokens[0]}")
        if not (self.is_color_word(tokens[1]) or self.is_class_word(tokens[1])):
            raise MalformedPromptError(1, f"expected a color or class word, got {tokens[1]}")
        if not self.is_pattern_word(tokens[2]):
            raise MalformedPromptError(2, f"expected a pattern word, got {tokens[2]}")
        if tokens[3] != self.pad_id:
            raise MalformedPromptError(3, f"expected <pad> ({self.pad_id}), got {tokens[3]}")

    def encode_prompt(self, color_or_class: str, pattern: str) -> List[int]:
        try:
            return [self.bos_id, self.word_to_id[color_or_class], self.word_to_id[pattern], self.pad_id]
        except KeyError as e:
            raise VocabularyError(f"Unknown prompt word {e.args[0]!r}")

    def parse_text(self, text: str) -> List[int]:
        """
        Turn free text such as "a warm stripes image" into prompt tokens.
        Filler words are dropped; exactly one color/class word and one
        pattern word must remain.
        """
        words = [w for w in text.lower().split() if w not in FILLER_WORDS]
        if len(words) != 2:
            raise VocabularyError(f"Prompt {text!r} must name one color or class and one pattern")
        return self.encode_prompt(words[0], words[1])

    def describe(self, tokens: Sequence[int]) -> str:
        return " ".join(self.prompt_tokens[int(t)] for t in tokens[1:3])


vocabulary = Vocabulary()
