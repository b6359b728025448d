"""Closed token vocabulary shared by the task generator and the model."""

PAD, BOS, EOS, STEP, LATENT = "<pad>", "<bos>", "<eos>", "<step>", "<latent>"
SPECIALS = [PAD, BOS, EOS, STEP, LATENT]
LETTERS = ["A", "B", "C", "D"]
DIRECTIONS = ["up", "down", "left", "right"]
WORDS = ["start", "hops"]
MAX_NUMBER = 48
NUMBERS = [str(i) for i in range(MAX_NUMBER + 1)]

TOKENS = SPECIALS + NUMBERS + LETTERS + DIRECTIONS + WORDS
VOCAB_SIZE = len(TOKENS)
TOKEN_ID = {tok: i for i, tok in enumerate(TOKENS)}

PAD_ID = TOKEN_ID[PAD]
BOS_ID = TOKEN_ID[BOS]
EOS_ID = TOKEN_ID[EOS]
STEP_ID = TOKEN_ID[STEP]
LATENT_ID = TOKEN_ID[LATENT]

# patch marker codes; index is the code fed to the patch embedder
MARKERS = ["plain", "start", "up", "down", "left", "right"]
MARKER_CODE = {m: i for i, m in enumerate(MARKERS)}


def encode(tokens) -> list[int]:
    try:
        return [TOKEN_ID[t] for t in tokens]
    except KeyError as exc:
        raise ValueError(f"unknown token {exc.args[0]!r}") from None


def decode(ids) -> list[str]:
    return [TOKENS[i] for i in ids]
