// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "usdiff/experiments.hpp"

namespace py = pybind11;
using namespace usdiff;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& a)
{
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor<double>::from(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

template <typename T>
Array to_array(const Tensor<T>& t)
{
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

KeyValues overrides_kv(const std::map<std::string, std::string>& overrides)
{
    return KeyValues(overrides.begin(), overrides.end());
}

} // namespace

PYBIND11_MODULE(_core, m)
{
    m.doc() = "Desk-scale in-context diffusion: schedules, samplers, scenes, metrics and training.";

    py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);

    py::class_<NoiseSchedule>(m, "NoiseSchedule")
        .def_readonly("T", &NoiseSchedule::T)
        .def_readonly("beta_start", &NoiseSchedule::beta_start)
        .def_readonly("beta_end", &NoiseSchedule::beta_end)
        .def_property_readonly("beta", [](const NoiseSchedule& s) { return py::array(py::cast(s.beta)); })
        .def_property_readonly("alpha_bar", [](const NoiseSchedule& s) { return py::array(py::cast(s.alpha_bar)); })
        .def_property_readonly("beta_tilde", [](const NoiseSchedule& s) { return py::array(py::cast(s.beta_tilde)); });

    m.def("build_schedule", &build_schedule, py::arg("T") = 1000, py::arg("beta_start") = 1e-4,
          py::arg("beta_end") = 0.02);

    py::class_<StepPlan>(m, "StepPlan")
        .def_readonly("steps", &StepPlan::steps)
        .def_readonly("T", &StepPlan::T)
        .def_property_readonly("K", &StepPlan::K)
        .def_property_readonly("strategy", [](const StepPlan& p) { return to_string(p.strategy); })
        .def("__repr__", [](const StepPlan& p) { return "StepPlan(" + to_string(p.strategy) + ", K=" + std::to_string(p.K()) + ")"; });

    m.def(
        "select_steps",
        [](const NoiseSchedule& s, int K, const std::string& strategy) {
            return select_steps(s, K, parse_strategy(strategy));
        },
        py::arg("schedule"), py::arg("K"), py::arg("strategy") = "power(0.5)",
        "Strategies: uniform, power(g), alpha_quantile.");

    m.def(
        "forward_sample",
        [](const Array& x0, int t, const Array& eps, const NoiseSchedule& s) {
            return to_array(forward_sample(to_tensor(x0), t, to_tensor(eps), s));
        },
        py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("schedule"));

    m.def(
        "predict_x0",
        [](const Array& x_t, const Array& eps_hat, int t, const NoiseSchedule& s) {
            return to_array(predict_x0(to_tensor(x_t), to_tensor(eps_hat), t, s));
        },
        py::arg("x_t"), py::arg("eps_hat"), py::arg("t"), py::arg("schedule"));

    m.def(
        "ddim_step",
        [](const Array& x_t, const Array& eps_hat, int t_from, int t_to, const NoiseSchedule& s) {
            return to_array(ddim_step(to_tensor(x_t), to_tensor(eps_hat), t_from, t_to, s));
        },
        py::arg("x_t"), py::arg("eps_hat"), py::arg("t_from"), py::arg("t_to"), py::arg("schedule"),
        "Deterministic (eta = 0) update.");

    m.def(
        "run_sandbox",
        [](const StepPlan& plan, const NoiseSchedule& s, int n, uint64_t seed, double mu0, double sigma0, int dim,
           double eta) {
            const auto r = run_sandbox(plan, GaussianSpec{mu0, sigma0, dim}, s, n, seed, eta);
            py::dict d;
            d["mean"] = r.mean_avg();
            d["var"] = r.var_avg();
            d["w1"] = r.w1_avg();
            d["denoiser_calls"] = r.denoiser_calls;
            return d;
        },
        py::arg("plan"), py::arg("schedule"), py::arg("n"), py::arg("seed") = 0, py::arg("mu0") = 0.0,
        py::arg("sigma0") = 1.0, py::arg("dim") = 1, py::arg("eta") = 0.0,
        "Samples with the exact Gaussian eps and reports per-coordinate averages.");

    m.def(
        "gen_scene",
        [](uint64_t seed, int size) {
            const auto sc = gen_scene<double>(seed, size);
            py::dict d;
            d["image"] = to_array(sc.image);
            d["edge"] = to_array(sc.edge_map);
            d["seg"] = to_array(sc.seg_map);
            d["depth"] = to_array(sc.depth_map);
            d["num_shapes"] = sc.spec.shapes.size();
            return d;
        },
        py::arg("seed"), py::arg("size") = 32);

    m.def(
        "annotate", [](const Array& image, const std::string& kind) { return to_array(annotate(to_tensor(image), parse_map_kind(kind))); },
        py::arg("image"), py::arg("kind"), "image: [3,H,W] or [N,3,H,W] in [-1, 1].");

    m.def(
        "rmse", [](const Array& a, const Array& b) { return rmse(to_tensor(a), to_tensor(b)); }, py::arg("pred"),
        py::arg("gt"));

    m.def(
        "frechet_proxy",
        [](const Array& a, const Array& b, uint64_t feature_seed) {
            return frechet_proxy(to_tensor(a).cast<float>(), to_tensor(b).cast<float>(), feature_seed);
        },
        py::arg("set_a"), py::arg("set_b"), py::arg("feature_seed") = 7, "Image sets [N,3,H,W] with N >= 50.");

    m.def(
        "time_embed",
        [](const std::vector<int>& t, int dim) { return to_array(time_embed<double>(std::span<const int>(t), dim)); },
        py::arg("t"), py::arg("dim"));

    m.def(
        "resolve_config",
        [](const std::map<std::string, std::string>& overrides) {
            return std::map<std::string, std::string>(resolve_config({}, overrides_kv(overrides)).to_kv());
        },
        py::arg("overrides") = std::map<std::string, std::string>{}, "Full key=value config after overrides.");

    m.def(
        "train",
        [](const std::map<std::string, std::string>& overrides, const std::filesystem::path& out) {
            RunConfig cfg = resolve_config({}, overrides_kv(overrides));
            cfg.out = out.string();
            std::vector<LossRow> rows;
            {
                py::gil_scoped_release release;
                rows = run_train(cfg, out).losses;
            }
            py::list result;
            for (const auto& r : rows) {
                py::dict d;
                d["step"] = r.step;
                d["task"] = to_string(r.task);
                d["train_loss"] = r.train_loss;
                d["feedback_loss"] = r.feedback_loss;
                d["total_loss"] = r.total_loss;
                result.append(d);
            }
            return result;
        },
        py::arg("overrides"), py::arg("out"), "Writes config.kv, loss.csv and model.usdf into out.");

    m.def(
        "sample",
        [](const std::filesystem::path& checkpoint, const std::string& task, int n, int K, const std::string& strategy,
           uint64_t seed, const std::filesystem::path& out) {
            const Checkpoint ckpt = load_checkpoint(checkpoint);
            const SampleOptions opt{parse_task(task), n, select_steps(ckpt.schedule, K, parse_strategy(strategy)), seed,
                                    ckpt.config.sample_chunk, 0.0};
            SampleOutput res;
            {
                py::gil_scoped_release release;
                res = run_sample(ckpt, opt, out);
            }
            py::dict d;
            d["images"] = to_array(res.images);
            d["targets"] = to_array(res.targets);
            d["denoiser_calls"] = res.denoiser_calls;
            d["seconds"] = res.seconds;
            return d;
        },
        py::arg("checkpoint"), py::arg("task") = "edge/image2map", py::arg("n") = 8, py::arg("K") = 10,
        py::arg("strategy") = "power(0.5)", py::arg("seed") = 0, py::arg("out") = "out",
        "Writes sample_<i>.ppm and report.csv into out.");
}
