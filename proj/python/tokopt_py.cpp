#include "tokopt/analysis.hpp"
#include "tokopt/backend.hpp"
#include "tokopt/edit.hpp"
#include "tokopt/eval.hpp"
#include "tokopt/io.hpp"
#include "tokopt/metrics.hpp"
#include "tokopt/objectives.hpp"
#include "tokopt/optimizer.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>

namespace py = pybind11;
using namespace tokopt;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

ImageTensor to_image(const Array& a) {
  if (a.ndim() != 3) throw Error(ErrorKind::kInvalidInput, "image must be a (C, H, W) array");
  const ImageShape shape{static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
                         static_cast<int>(a.shape(2))};
  return ImageTensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const ImageTensor& image) {
  Array out({image.channels(), image.height(), image.width()});
  std::copy(image.data().begin(), image.data().end(), out.mutable_data());
  return out;
}

Eigen::MatrixXd to_matrix(const Array& a) {
  if (a.ndim() != 2) throw Error(ErrorKind::kInvalidInput, "expected a 2-D array");
  Eigen::MatrixXd m(a.shape(0), a.shape(1));
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    for (py::ssize_t j = 0; j < a.shape(1); ++j) m(i, j) = a.at(i, j);
  return m;
}

nlohmann::json parse(const std::string& text) {
  return text.empty() ? nlohmann::json::object() : nlohmann::json::parse(text);
}

struct PyTokenizer {
  std::shared_ptr<const TokenizerBackend> backend;
};

struct PyScorer {
  std::shared_ptr<const ScorerBackend> backend;
};

PyTokenizer make_tokenizer(const std::string& config_json) {
  return {load_tokenizer(BackendConfig::from_json(parse(config_json)))};
}

PyScorer make_scorer(const std::string& config_json) {
  return {load_scorer(BackendConfig::from_json(parse(config_json)))};
}

py::dict run_result(const RunResult& r) {
  py::dict d;
  d["image"] = to_array(r.image);
  d["tokens"] = r.tokens.indices;
  d["trajectory"] = r.trajectory.to_json().dump();
  d["used_ema"] = r.used_ema;
  d["steps"] = r.state.step;
  return d;
}

}  // namespace

PYBIND11_MODULE(_tokopt, m) {
  m.doc() = "Token-space optimisation and editing for 1D image tokenizers";

  static py::exception<Error> error_type(m, "TokoptError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error_type, (std::string(to_string(e.kind())) + ": " + e.what()).c_str());
    }
  });

  py::class_<PyTokenizer>(m, "Tokenizer")
      .def(py::init(&make_tokenizer), py::arg("config_json") = R"({"kind":"toy-tokenizer"})")
      .def_property_readonly("variant", [](const PyTokenizer& t) { return t.backend->variant(); })
      .def_property_readonly("num_tokens", [](const PyTokenizer& t) { return t.backend->num_tokens(); })
      .def_property_readonly("codebook_size", [](const PyTokenizer& t) { return t.backend->codebook().size(); })
      .def_property_readonly("image_shape",
                             [](const PyTokenizer& t) {
                               const auto s = t.backend->image_shape();
                               return py::make_tuple(s.channels, s.height, s.width);
                             })
      .def("tokenize", [](const PyTokenizer& t, const Array& img) { return t.backend->tokenize(to_image(img)).indices; })
      .def("decode",
           [](const PyTokenizer& t, const std::vector<int>& tokens) {
             TokenSequence seq{tokens, t.backend->codebook().size()};
             validate_tokens(seq);
             return to_array(t.backend->decode_tokens(seq));
           })
      .def("reconstruct", [](const PyTokenizer& t, const Array& img) { return to_array(t.backend->reconstruct(to_image(img))); });

  py::class_<PyScorer>(m, "Scorer")
      .def(py::init(&make_scorer), py::arg("config_json") = R"({"kind":"toy-scorer"})")
      .def_property_readonly("variant", [](const PyScorer& s) { return s.backend->variant(); })
      .def("similarity", [](const PyScorer& s, const Array& img, const std::string& prompt) {
        return cosine_similarity(embed_whole_image(*s.backend, to_image(img)), s.backend->embed_text(prompt));
      });

  m.def("replace_tokens",
        [](const std::vector<int>& target, const std::vector<int>& ref, const std::vector<int>& positions,
           int codebook_size) {
          return replace_tokens({target, codebook_size}, {ref, codebook_size}, positions).indices;
        },
        py::arg("target"), py::arg("ref"), py::arg("positions"), py::arg("codebook_size"));

  m.def("copy_paste_edit",
        [](const PyTokenizer& t, const Array& target, const Array& ref, const std::vector<int>& positions) {
          return to_array(copy_paste_edit(to_image(target), to_image(ref), positions, *t.backend));
        });

  m.def("preset_positions", &preset_positions);

  m.def("importance_profile",
        [](const PyTokenizer& t, const std::vector<Array>& images, const std::vector<int>& labels, int num_classes) {
          ClassPartition partition;
          for (int c = 0; c < num_classes; ++c) partition.prompts.push_back("class-" + std::to_string(c));
          partition.assignment = labels;
          std::vector<LatentFeatures> features;
          for (const auto& img : images) features.push_back(lookup(t.backend->tokenize(to_image(img)), t.backend->codebook()));
          const ImportanceProfile p = importance_profile(fit_token_stats(features, partition));
          return std::vector<double>(p.raw.data(), p.raw.data() + p.raw.size());
        });

  m.def("optimizer_config", [](const std::string& preset_name) {
    if (preset_name == "with-tweaks") return OptimizerConfig::with_tweaks().to_json().dump();
    if (preset_name == "inpainting") return OptimizerConfig::inpainting().to_json().dump();
    if (preset_name == "from-scratch") return OptimizerConfig::from_scratch().to_json().dump();
    if (preset_name == "text-edit") return OptimizerConfig::text_edit().to_json().dump();
    throw Error(ErrorKind::kInvalidInput, "unknown preset '" + preset_name + "'");
  });

  m.def("optimize",
        [](const PyTokenizer& t, const PyScorer& s, std::optional<Array> seed_image, const std::string& prompt,
           const std::string& config_json, int crops) {
          const OptimizerConfig config = OptimizerConfig::from_json(parse(config_json));
          std::optional<ImageTensor> seed;
          if (seed_image) seed = to_image(*seed_image);
          CropSmoothing smoothing;
          smoothing.n_crops = crops;
          const ScorerSimilarityObjective objective(s.backend, s.backend->embed_text(prompt), smoothing, prompt);
          RunResult r;
          {
            py::gil_scoped_release release;
            r = run(seed, objective, *t.backend, config);
          }
          return run_result(r);
        },
        py::arg("tokenizer"), py::arg("scorer"), py::arg("seed_image"), py::arg("prompt"),
        py::arg("config_json") = "", py::arg("crops") = CropSmoothing::kDefaultCrops);

  m.def("inpaint",
        [](const PyTokenizer& t, const Array& image, const Array& mask, double blur_radius, const std::string& config_json) {
          nlohmann::json doc = OptimizerConfig::inpainting().to_json();
          doc.merge_patch(parse(config_json));
          const OptimizerConfig config = OptimizerConfig::from_json(doc);
          const ImageTensor reference = to_image(image);
          const SoftMask soft = soft_mask_from_binary(to_matrix(mask), blur_radius);
          const InpaintContext context{reference, soft};
          const MaskedL1Objective objective(reference, soft);
          RunOptions options;
          options.inpaint = &context;
          RunResult r;
          {
            py::gil_scoped_release release;
            r = run(reference, objective, *t.backend, config, options);
          }
          py::dict d = run_result(r);
          d["image"] = to_array(blend(r.image, reference, soft));
          return d;
        },
        py::arg("tokenizer"), py::arg("image"), py::arg("mask"), py::arg("blur_radius") = 2.0,
        py::arg("config_json") = "");

  m.def("fid", [](const Array& a, const Array& b) {
    return fid(FeatureStats::from_rows(to_matrix(a)), FeatureStats::from_rows(to_matrix(b)));
  });

  m.def("inception_score",
        [](const Array& posteriors, int splits) {
          const InceptionScore s = inception_score(to_matrix(posteriors), splits);
          return py::make_tuple(s.mean, s.std);
        },
        py::arg("posteriors"), py::arg("splits") = 10);

  m.def("run_evaluation", [](const std::string& config_json) {
    EvalArtifacts result;
    const EvalConfig config = EvalConfig::from_json(parse(config_json));
    {
      py::gil_scoped_release release;
      result = run_evaluation(config);
    }
    return result.report.to_json().dump();
  });

  m.def("encode_png", [](const Array& img) {
    const auto bytes = encode_png(to_image(img));
    return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  });
  m.def("decode_png", [](const py::bytes& data, int channels) {
    const std::string s = data;
    return to_array(decode_png(std::vector<std::uint8_t>(s.begin(), s.end()), channels));
  }, py::arg("data"), py::arg("channels") = 3);
}
