#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "upcycle/alignment.hpp"
#include "upcycle/analysis.hpp"
#include "upcycle/checkpoint_io.hpp"
#include "upcycle/cli.hpp"
#include "upcycle/corpus.hpp"
#include "upcycle/fusion.hpp"
#include "upcycle/training.hpp"

namespace py = pybind11;
using namespace upcycle;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

TensorD to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return TensorD(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

template <class T>
Array to_array(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  double* dst = out.mutable_data();
  for (std::size_t i = 0; i < t.size(); ++i) dst[i] = static_cast<double>(t[i]);
  return out;
}

py::tuple assignment(const Assignment& a) { return py::make_tuple(a.perm.map(), a.total_cost); }

py::dict checkpoint_tensors(const std::string& dir) {
  const auto manifest = read_manifest(dir);
  py::dict out;
  auto fill = [&](const std::string& name, const TensorF& t) { out[py::str(name)] = to_array(t); };
  switch (manifest.kind) {
    case CheckpointKind::dense: for_each_tensor(load_dense<float>(dir), fill); break;
    case CheckpointKind::backbone: for_each_tensor(load_backbone<float>(dir), fill); break;
    case CheckpointKind::moe: for_each_tensor(load_moe<float>(dir), fill); break;
  }
  return out;
}

Array forward_checkpoint(const std::string& dir, const std::vector<int>& tokens) {
  const auto manifest = read_manifest(dir);
  if (manifest.kind == CheckpointKind::moe) return to_array(moe_forward(load_moe<float>(dir), tokens));
  if (manifest.kind == CheckpointKind::dense) return to_array(forward(load_dense<float>(dir), tokens));
  throw std::invalid_argument("forward needs a dense or moe checkpoint, got " + to_string(manifest.kind));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Upcycling dense specialists into a mixture of experts";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);

  m.def("matmul", [](const Array& a, const Array& b) { return to_array(matmul(to_tensor(a), to_tensor(b))); });
  m.def("softmax_rows", [](const Array& x) { return to_array(softmax_rows(to_tensor(x))); });
  m.def(
      "slerp",
      [](const Array& a, const Array& b, double t, double threshold) {
        return to_array(slerp(to_tensor(a), to_tensor(b), t, threshold));
      },
      py::arg("w1"), py::arg("w2"), py::arg("t"), py::arg("dot_threshold") = 0.9995);
  m.def("linear_cka", [](const Array& x, const Array& y) { return linear_cka(to_tensor(x), to_tensor(y)); });

  m.def("solve_lap", [](const Array& c) { return assignment(solve_lap(CostMatrix{to_tensor(c)})); },
        "Minimum-cost assignment; returns (perm, total_cost) with perm[row] = column.");
  m.def("brute_force_lap", [](const Array& c) { return assignment(brute_force_lap(CostMatrix{to_tensor(c)})); });
  m.def(
      "remap_ffn",
      [](const Array& up, const Array& down, const std::vector<std::size_t>& perm) {
        auto r = remap_ffn(FfnWeights<double>{to_tensor(up), to_tensor(down)}, Permutation(0, perm));
        return py::make_tuple(to_array(r.up), to_array(r.down));
      },
      py::arg("up"), py::arg("down"), py::arg("perm"));

  m.def("router_probs", [](const Array& x, const Array& wg) { return to_array(router_probs(to_tensor(x), to_tensor(wg))); });
  m.def(
      "load_balance_loss",
      [](const std::vector<std::vector<std::size_t>>& indices, const Array& probs) {
        const TensorD p = to_tensor(probs);
        if (p.shape().size() != 2 || p.rows() != indices.size()) {
          throw ShapeError("load_balance_loss: probs must be [tokens x experts] with one row per index list");
        }
        std::vector<RoutingRecord> trace;
        for (std::size_t t = 0; t < indices.size(); ++t) {
          std::vector<double> row(p.row(t).begin(), p.row(t).end());
          std::vector<double> gates;
          for (auto i : indices[t]) gates.push_back(i < row.size() ? row[i] : 0.0);
          trace.push_back({t, 0, indices[t], gates, row});
        }
        const std::size_t k = indices.empty() ? 1 : indices[0].size();
        return load_balance_loss(trace, p.cols(), k);
      },
      py::arg("indices"), py::arg("probs"));

  m.def("shared_vocab", &shared_vocab);
  m.def(
      "gen_corpus",
      [](const std::string& domain, std::uint64_t seed, std::size_t n, std::size_t len) {
        return gen_corpus(parse_domain(domain), seed, n, len).sequences;
      },
      py::arg("domain"), py::arg("seed"), py::arg("n_sequences"), py::arg("seq_len"));
  m.def("evaluate_math", [](const std::vector<int>& tokens) {
    const auto r = evaluate_math(tokens);
    return py::dict(py::arg("equations") = r.equations, py::arg("correct") = r.correct, py::arg("malformed") = r.malformed);
  });
  m.def("decode", [](const std::vector<int>& tokens) { return decode(tokens); });

  m.def("checkpoint_tensors", &checkpoint_tensors, "All tensors of a checkpoint directory as float64 arrays.");
  m.def("forward", &forward_checkpoint, py::arg("checkpoint"), py::arg("tokens"));
  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        py::gil_scoped_release release;
        return cli::run(args);
      },
      "Runs the command-line tool in-process and returns its exit code.");
}
