#include "clipcap/cli.hpp"
#include "clipcap/dual_encoder.hpp"
#include "clipcap/errors.hpp"
#include "clipcap/metrics.hpp"
#include "clipcap/rng.hpp"
#include "clipcap/textproc.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace clipcap;

PYBIND11_MODULE(_clipcap, m) {
    m.doc() = "Caption rewards, metrics and negative-text generation.";

    static py::exception<Error> error(m, "Error", PyExc_RuntimeError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            error(e.what());
        }
    });

    py::class_<Rng>(m, "Rng").def(py::init<std::uint64_t>(), py::arg("seed")).def("randint", &Rng::randint);

    py::class_<text::Caption>(m, "Caption")
        .def_static("parse", &text::Caption::parse)
        .def_static("from_tokens", &text::Caption::from_tokens)
        .def_property_readonly("text", &text::Caption::text)
        .def_property_readonly("tokens", &text::Caption::tokens)
        .def("__len__", &text::Caption::size)
        .def("__eq__", [](const text::Caption& a, const text::Caption& b) { return a == b; })
        .def("__repr__", [](const text::Caption& c) { return "Caption('" + c.text() + "')"; });

    py::class_<text::Vocabulary>(m, "Vocabulary")
        .def_static("build", [](const std::vector<text::Caption>& corpus, int min_freq) {
            return text::Vocabulary::build(corpus, min_freq);
        }, py::arg("corpus"), py::arg("min_freq") = 1)
        .def("__len__", &text::Vocabulary::size)
        .def("id", &text::Vocabulary::id)
        .def("token", &text::Vocabulary::token)
        .def("__contains__", &text::Vocabulary::contains)
        .def("encode", &text::Vocabulary::encode)
        .def("decode", [](const text::Vocabulary& v, const std::vector<int>& ids) { return v.decode(ids); })
        .def_property_readonly("tokens", &text::Vocabulary::tokens);

    py::class_<text::NegativeGenConfig>(m, "NegativeGenConfig")
        .def(py::init<>())
        .def_readwrite("n_max_gram", &text::NegativeGenConfig::n_max_gram)
        .def_readwrite("n_max_repeat", &text::NegativeGenConfig::n_max_repeat)
        .def_readwrite("n_max_tokens", &text::NegativeGenConfig::n_max_tokens);

    m.def("normalize", [](const std::string& s) { return text::normalize(s); });
    m.def(
        "generate_negative",
        [](const text::Caption& c, const text::Vocabulary& v, const text::NegativeGenConfig& cfg, Rng& rng) {
            const auto neg = text::generate_negative(c, v, cfg, rng);
            return py::make_tuple(neg.caption, std::string(text::to_string(neg.op)));
        },
        py::arg("caption"), py::arg("vocab"), py::arg("config"), py::arg("rng"),
        "Returns (negative caption, operation name).");

    m.def(
        "clip_s",
        [](const Eigen::VectorXd& image, const Eigen::VectorXd& text, double w) {
            return dual::clip_s(image, text, dual::ClipScoreConfig{w});
        },
        py::arg("image_emb"), py::arg("text_emb"), py::arg("w") = 2.5);

    m.def("bleu4", &metrics::bleu4, py::arg("candidates"), py::arg("references"));
    m.def("cider_d", &metrics::cider_d, py::arg("candidates"), py::arg("references"));
    m.def("rouge_l", &metrics::rouge_l, py::arg("candidates"), py::arg("references"));
    m.def(
        "word_recall",
        [](const metrics::CandidateMap& p, const metrics::PhraseMap& g, bool token_match) {
            return metrics::word_recall(p, g, token_match ? metrics::WordMatch::token : metrics::WordMatch::substring);
        },
        py::arg("predictions"), py::arg("phrases"), py::arg("token_match") = false);
    m.def("retrieval_recall", &metrics::retrieval_recall, py::arg("caption_emb"), py::arg("image_emb"),
          py::arg("ks") = std::vector<int>{1, 5, 10});
    m.def("repetition_rate", py::overload_cast<const std::string&>(&metrics::repetition_rate));

    m.def(
        "run_cli", [](const std::vector<std::string>& args) { return cli::run(args); }, py::arg("args"),
        "Runs a clipcap subcommand in-process and returns its exit code.");
}
