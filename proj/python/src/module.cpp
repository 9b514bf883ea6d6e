#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "octo/cli.hpp"
#include "octo/problems.hpp"

namespace py = pybind11;
using namespace octo;

PYBIND11_MODULE(_core, m) {
    m.doc() = "octree AMR hydrodynamics with FMM gravity";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());
    py::register_exception<NumericalError>(m, "NumericalError", base.ptr());
    py::register_exception<StructuralError>(m, "StructuralError", base.ptr());
    py::register_exception<CapacityError>(m, "CapacityError", base.ptr());

    py::class_<cli::RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_property(
            "problem", [](const cli::RunConfig& c) { return c.problem == cli::Problem::sedov ? "sedov" : "star"; },
            [](cli::RunConfig& c, const std::string& v) {
                if (v == "sedov") c.problem = cli::Problem::sedov;
                else if (v == "star") c.problem = cli::Problem::star;
                else throw ConfigError("field 'problem': unknown problem '" + v + "'");
            })
        .def_property(
            "hydro", [](const cli::RunConfig& c) { return c.scheme == hydro::Scheme::old_faces ? "old" : "new"; },
            [](cli::RunConfig& c, const std::string& v) {
                if (v == "old") c.scheme = hydro::Scheme::old_faces;
                else if (v == "new") c.scheme = hydro::Scheme::new_points;
                else throw ConfigError("field 'hydro': expected old or new");
            })
        .def_readwrite("subgrid", &cli::RunConfig::n_per_side)
        .def_readwrite("level", &cli::RunConfig::max_level)
        .def_readwrite("theta", &cli::RunConfig::theta)
        .def_readwrite("steps", &cli::RunConfig::steps)
        .def_readwrite("end_time", &cli::RunConfig::end_time)
        .def_readwrite("workers", &cli::RunConfig::workers)
        .def_readwrite("lanes", &cli::RunConfig::lanes)
        .def_readwrite("cfl", &cli::RunConfig::cfl)
        .def_readwrite("gravity_each_stage", &cli::RunConfig::gravity_each_stage)
        .def_readwrite("out_dir", &cli::RunConfig::out_dir)
        .def_readwrite("checkpoint", &cli::RunConfig::checkpoint)
        .def_readwrite("resume", &cli::RunConfig::resume)
        .def_readwrite("seed", &cli::RunConfig::seed)
        .def("validate", [](const cli::RunConfig& c) { cli::validate(c); });

    py::class_<problems::Totals>(m, "Totals")
        .def_readonly("mass", &problems::Totals::mass)
        .def_property_readonly("momentum",
                               [](const problems::Totals& t) {
                                   return py::make_tuple(t.momentum.x, t.momentum.y, t.momentum.z);
                               })
        .def_readonly("egas", &problems::Totals::egas)
        .def_readonly("energy", &problems::Totals::energy);

    py::class_<cli::MetricsRow>(m, "MetricsRow")
        .def_readonly("step", &cli::MetricsRow::step)
        .def_readonly("time", &cli::MetricsRow::time)
        .def_readonly("dt", &cli::MetricsRow::dt)
        .def_readonly("wall_seconds", &cli::MetricsRow::wall_seconds)
        .def_readonly("cells", &cli::MetricsRow::cells)
        .def_readonly("cells_per_second", &cli::MetricsRow::cells_per_second)
        .def_readonly("totals", &cli::MetricsRow::totals)
        .def_readonly("rho_l1", &cli::MetricsRow::rho_l1);

    py::class_<cli::MetricsReport>(m, "MetricsReport")
        .def_readonly("rows", &cli::MetricsReport::rows)
        .def_readonly("steps_completed", &cli::MetricsReport::steps_completed)
        .def_readonly("final_time", &cli::MetricsReport::final_time)
        .def_readonly("wall_seconds", &cli::MetricsReport::wall_seconds)
        .def_readonly("cells", &cli::MetricsReport::cells)
        .def_readonly("leaves", &cli::MetricsReport::leaves)
        .def_readonly("cells_per_second", &cli::MetricsReport::cells_per_second)
        .def_readonly("kernel_launches", &cli::MetricsReport::kernel_launches)
        .def_readonly("omega", &cli::MetricsReport::omega)
        .def_readonly("rho_l1", &cli::MetricsReport::rho_l1)
        .def_readonly("artifacts", &cli::MetricsReport::artifacts)
        .def("mass_drift", &cli::MetricsReport::mass_drift)
        .def("energy_drift", &cli::MetricsReport::energy_drift)
        .def("csv", [](const cli::MetricsReport& r) { return cli::metrics_csv(r); });

    m.def(
        "parse_config",
        [](const std::vector<std::string>& args, std::optional<std::filesystem::path> file) {
            try {
                return cli::parse_config(args, file);
            } catch (const cli::HelpRequested& h) {
                throw ConfigError(h.text);
            }
        },
        py::arg("args"), py::arg("file") = py::none());
    m.def(
        "run", [](const cli::RunConfig& c) { return cli::run(c); }, py::arg("config"),
        py::call_guard<py::gil_scoped_release>());

    m.def("sedov_xi0", &problems::sedov_xi0, py::arg("gamma"));
    m.def(
        "sedov_analytic",
        [](real t, real r, real E0, real rho0, real gamma) {
            const auto s = problems::sedov_analytic(t, r, E0, rho0, gamma);
            return py::make_tuple(s.rho, s.v, s.p);
        },
        py::arg("t"), py::arg("r"), py::arg("E0") = 1.0, py::arg("rho0") = 1.0, py::arg("gamma") = 1.4);
    m.def("sedov_shock_radius", &problems::sedov_shock_radius, py::arg("t"), py::arg("E0") = 1.0,
          py::arg("rho0") = 1.0, py::arg("gamma") = 1.4);
    m.def("dynamical_time", &problems::dynamical_time, py::arg("rho_c"), py::arg("G") = 1.0);
}
