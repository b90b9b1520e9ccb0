import importlib

try:  # installed package layout: the extension lives inside this package
    _impl = importlib.import_module("._microbert", __name__)
except ImportError:  # development layout: _microbert.so directly on sys.path
    _impl = importlib.import_module("_microbert")

__all__ = [
    "DataError",
    "EncodedSentence",
    "F1Score",
    "ParseScore",
    "RunConfig",
    "UsageError",
    "Vocabulary",
    "choose_vocab_size",
    "crf_viterbi",
    "decode_mst",
    "encode",
    "eval_ner",
    "eval_parse",
    "inspect_checkpoint",
    "iob1_to_bioul",
    "las_uas",
    "load_run_config",
    "normalize",
    "pretrain",
    "report",
    "span_f1",
    "train_tokenizer",
]

for _name in __all__:
    globals()[_name] = getattr(_impl, _name)
del _impl, _name, importlib
