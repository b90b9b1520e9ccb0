#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <unordered_map>

#include "microbert/config.hpp"
#include "microbert/corpus.hpp"
#include "microbert/eval.hpp"
#include "microbert/pipelines.hpp"
#include "microbert/pretrainer.hpp"
#include "microbert/tokenizer.hpp"

namespace py = pybind11;
using namespace microbert;

PYBIND11_MODULE(_microbert, m) {
  m.doc() = "tiny monolingual BERT pretraining and evaluation";

  // tokenizer
  py::class_<Vocabulary>(m, "Vocabulary")
      .def_static("train",
                  [](const std::unordered_map<std::string, int64_t>& counts, int32_t size) {
                    return Vocabulary::train(counts, size);
                  },
                  py::arg("word_counts"), py::arg("vocab_size"))
      .def_static("load_file", &Vocabulary::load_file, py::arg("path"))
      .def("save_file", &Vocabulary::save_file, py::arg("path"))
      .def("__len__", &Vocabulary::size)
      .def("piece", &Vocabulary::piece, py::arg("id"))
      .def("piece_id", &Vocabulary::piece_id, py::arg("piece"))
      .def("pieces", &Vocabulary::pieces)
      .def("encode_word", &Vocabulary::encode_word, py::arg("normalized_word"));

  m.def("normalize", &normalize, py::arg("text"));
  m.def("choose_vocab_size", &choose_vocab_size, py::arg("unique_token_count"));

  py::class_<EncodedSentence>(m, "EncodedSentence")
      .def_readonly("words", &EncodedSentence::words)
      .def_readonly("norm_words", &EncodedSentence::norm_words)
      .def_readonly("piece_ids", &EncodedSentence::piece_ids)
      .def_readonly("word_pieces", &EncodedSentence::word_pieces)
      .def_readonly("xpos", &EncodedSentence::xpos)
      .def_readonly("heads", &EncodedSentence::heads)
      .def_readonly("deprels", &EncodedSentence::deprels)
      .def_readonly("ner", &EncodedSentence::ner)
      .def("__len__", &EncodedSentence::word_count);

  m.def("encode", &encode, py::arg("words"), py::arg("vocab"));

  // corpus
  m.def("iob1_to_bioul", &iob1_to_bioul, py::arg("tags"));

  // eval scoring
  py::class_<ParseScore>(m, "ParseScore")
      .def_readonly("uas", &ParseScore::uas)
      .def_readonly("las", &ParseScore::las);
  py::class_<F1Score>(m, "F1Score")
      .def_readonly("precision", &F1Score::precision)
      .def_readonly("recall", &F1Score::recall)
      .def_readonly("f1", &F1Score::f1);

  m.def("decode_mst", &decode_mst, py::arg("scores"), py::arg("n"),
        "scores is the flattened (n+1)x(n+1) arc matrix, row = dependent, col = head");
  m.def("las_uas", &las_uas, py::arg("gold_heads"), py::arg("gold_labels"),
        py::arg("pred_heads"), py::arg("pred_labels"));
  m.def("span_f1", &span_f1, py::arg("gold"), py::arg("pred"));
  m.def(
      "crf_viterbi",
      [](const std::vector<double>& emissions, int64_t n, int64_t k,
         const std::vector<double>& transitions) { return crf_viterbi(emissions, n, k,
                                                                      transitions, nullptr); },
      py::arg("emissions"), py::arg("n"), py::arg("k"), py::arg("transitions"));

  // pipelines (full runs driven by a config file)
  m.def("load_run_config", &load_run_config, py::arg("path"));
  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_readwrite("unlabeled", &RunConfig::unlabeled)
      .def_readwrite("treebank", &RunConfig::treebank)
      .def_readwrite("ner", &RunConfig::ner)
      .def_readwrite("vocab", &RunConfig::vocab)
      .def_readwrite("checkpoint", &RunConfig::checkpoint)
      .def_readwrite("out_dir", &RunConfig::out_dir)
      .def_readwrite("seed", &RunConfig::seed);
  m.def("train_tokenizer", &pipeline_train_tokenizer, py::arg("config"));
  m.def("pretrain", &pipeline_pretrain, py::arg("config"));
  m.def("eval_parse", &pipeline_eval_parse, py::arg("config"));
  m.def("eval_ner", &pipeline_eval_ner, py::arg("config"));
  m.def("report", &pipeline_report, py::arg("runlogs"), py::arg("out"));
  m.def("inspect_checkpoint", &pipeline_inspect, py::arg("dir"));

  py::register_exception<UsageError>(m, "UsageError");
  py::register_exception<DataError>(m, "DataError");
}
