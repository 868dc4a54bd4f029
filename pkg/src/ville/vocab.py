"""Fixed integer vocabulary shared by the corpus and the model.

Special tokens sit at reserved low indices, then one token per input-frame
time index (for "what happens at <t>?" questions), then event symbols.
"""
from __future__ import annotations

from dataclasses import dataclass

PAD = 0
EOS = 1
TXT_EMBED = 2
VID_EMBED = 3
YES = 4
NO = 5
Q_WHAT = 6  # "what happens at"
Q_MATCH = 7  # "Does the above video match the caption?"
CAPTION = 8  # "Caption:"
ARROW = 9  # change-text separator "X -> Y"
N_SPECIAL = 10

SPECIAL_NAMES = {
    PAD: "<pad>",
    EOS: "<eos>",
    TXT_EMBED: "<|txt_embed|>",
    VID_EMBED: "<|vid_embed|>",
    YES: "Yes",
    NO: "No",
    Q_WHAT: "<what-at>",
    Q_MATCH: "<match?>",
    CAPTION: "<caption>",
    ARROW: "->",
}


@dataclass(frozen=True)
class Vocab:
    n_time: int = 64
    n_symbols: int = 64

    @property
    def size(self) -> int:
        return N_SPECIAL + self.n_time + self.n_symbols

    def time_token(self, index: int) -> int:
        if not 0 <= index < self.n_time:
            raise ValueError(f"time index {index} outside [0, {self.n_time})")
        return N_SPECIAL + index

    def symbol_token(self, symbol: int) -> int:
        if not 0 <= symbol < self.n_symbols:
            raise ValueError(f"symbol {symbol} outside [0, {self.n_symbols})")
        return N_SPECIAL + self.n_time + symbol

    def token_symbol(self, token: int) -> int | None:
        s = token - N_SPECIAL - self.n_time
        return s if 0 <= s < self.n_symbols else None

    def name(self, token: int) -> str:
        if token in SPECIAL_NAMES:
            return SPECIAL_NAMES[token]
        if N_SPECIAL <= token < N_SPECIAL + self.n_time:
            return f"t{token - N_SPECIAL}"
        s = self.token_symbol(token)
        return f"sym{s}" if s is not None else f"<{token}>"

    def render(self, tokens) -> str:
        return " ".join(self.name(int(t)) for t in tokens)
