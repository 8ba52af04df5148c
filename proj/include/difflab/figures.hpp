#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "difflab/ensemble.hpp"
#include "difflab/io.hpp"
#include "difflab/mixture.hpp"
#include "difflab/parallel.hpp"
#include "difflab/schedule.hpp"

namespace difflab {

// ---------------------------------------------------------------------------
// Boundary-variance heatmaps (proxy-variance field over a 2-D grid).

struct Fig1Spec {
  MixtureData data;
  ForwardSchedule sched;
  std::vector<double> t_list;
  Vec grid_lo;
  Vec grid_hi;
  int resolution = 256;
};

struct Fig1Grid {
  double t = 0.0;
  Mat field;  // field(i, j) at x = (x1_j, x2_i), both axes ascending
};

struct Fig1Result {
  Fig1Spec spec;
  std::vector<Fig1Grid> grids;

  Vec cell_center(int i, int j) const {
    Vec c(2);
    c(0) = spec.grid_lo(0) +
           (j + 0.5) * (spec.grid_hi(0) - spec.grid_lo(0)) / spec.resolution;
    c(1) = spec.grid_lo(1) +
           (i + 0.5) * (spec.grid_hi(1) - spec.grid_lo(1)) / spec.resolution;
    return c;
  }
};

inline Fig1Result run_fig1(const Fig1Spec& spec, int threads = 1) {
  if (spec.data.dim() != 2) throw config_error("fig1 requires a 2-D data preset");
  Fig1Result result{spec, {}};
  result.grids.resize(spec.t_list.size());
  for (std::size_t k = 0; k < spec.t_list.size(); ++k) {
    const double t = spec.t_list[k];
    Mat field(spec.resolution, spec.resolution);
    parallel_for_index(static_cast<std::size_t>(spec.resolution), threads,
                       [&](std::size_t i) {
                         for (int j = 0; j < spec.resolution; ++j) {
                           const Vec x = result.cell_center(static_cast<int>(i), j);
                           field(static_cast<Eigen::Index>(i), j) =
                               boundary_ratio(spec.data, spec.sched, x, t);
                         }
                       });
    result.grids[k] = Fig1Grid{t, std::move(field)};
  }
  return result;
}

inline void write_fig1(const Fig1Result& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t k = 0; k < result.grids.size(); ++k) {
    const Fig1Grid& g = result.grids[k];
    CsvWriter csv(dir / ("field_t" + std::to_string(k) + ".csv"));
    csv.header({"x0", "x1", "value"});
    for (int i = 0; i < result.spec.resolution; ++i)
      for (int j = 0; j < result.spec.resolution; ++j) {
        const Vec c = result.cell_center(i, j);
        csv.row({c(0), c(1), g.field(i, j)});
      }
    write_pgm(dir / ("field_t" + std::to_string(k) + ".pgm"), g.field);
  }
}

// ---------------------------------------------------------------------------
// Ensemble output files: hist.csv, metrics.json, samples_model_<i>.csv.

inline void write_histogram_csv(const HistogramGrid& hist,
                                const std::filesystem::path& path) {
  CsvWriter csv(path);
  std::vector<std::string> names;
  for (int d = 0; d < hist.dim(); ++d) names.push_back("bin_center_" + std::to_string(d));
  names.push_back("mass");
  csv.header(names);
  for (std::size_t flat = 0; flat < hist.bin_count(); ++flat) {
    const Vec c = hist.center(flat);
    std::vector<double> row(c.data(), c.data() + c.size());
    row.push_back(hist.mass(flat));
    csv.row(row);
  }
}

inline void write_ensemble_outputs(const EnsembleResult& result,
                                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_histogram_csv(result.hist, dir / "hist.csv");
  write_metrics_kv(dir / "metrics.json",
                   {{"boundary_mass", result.metrics.boundary_mass},
                    {"clipped_fraction", result.metrics.clipped_fraction},
                    {"kl_memorization", result.metrics.kl_memorization},
                    {"nn_distance_p50", result.metrics.nn_distance_p50},
                    {"nn_distance_p90", result.metrics.nn_distance_p90},
                    {"nn_distance_p99", result.metrics.nn_distance_p99},
                    {"offmanifold_variance", result.metrics.offmanifold_variance}});
  for (std::size_t i = 0; i < result.model_samples.size(); ++i) {
    const Mat& rows = result.model_samples[i];
    if (rows.rows() == 0) continue;  // failed model
    CsvWriter csv(dir / ("samples_model_" + std::to_string(i) + ".csv"));
    std::vector<std::string> names;
    for (Eigen::Index d = 0; d < rows.cols(); ++d) names.push_back("x" + std::to_string(d));
    names.push_back("seed");
    csv.header(names);
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      std::vector<double> row(rows.cols());
      for (Eigen::Index d = 0; d < rows.cols(); ++d) row[static_cast<std::size_t>(d)] = rows(r, d);
      csv.row_with_tag(row, result.model_seeds[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// Cutoff / overparameterization sweep on the 1-D three-point preset.

struct Fig2Spec {
  std::function<ForwardSchedule(double eps)> make_schedule;
  MixtureData data{Mat::Zero(1, 1)};
  std::vector<double> eps_list;
  std::vector<double> fp_list;  // kappa = F/P per cell
  std::function<std::shared_ptr<const FeatureSet>(const ForwardSchedule&)> make_features;
  LinearFitOptions fit;
  SamplerSpec sampler;
  int n_models = 100;
  std::uint64_t seed = 0;
  HistSpec hist;
  double t_ref = 0.25;
  WeightFn lambda = unit_weight();
  bool exact_reference = true;  // extra memorization-limit cell with the true score
};

struct Fig2Cell {
  double eps = 0.0;
  double fp_ratio = 0.0;
  int sample_count = 0;
  int feature_count = 0;
  MetricsReport metrics;
  HistogramGrid hist;
};

struct Fig2Result {
  std::vector<Fig2Cell> cells;  // eps-major order
  std::optional<Fig2Cell> exact;

  const Fig2Cell& cell(std::size_t eps_idx, std::size_t fp_idx,
                       std::size_t fp_count) const {
    return cells[eps_idx * fp_count + fp_idx];
  }
};

inline Fig2Result run_fig2(const Fig2Spec& spec, int threads = 1) {
  if (spec.data.dim() != 1) throw config_error("fig2 requires a 1-D data preset");
  Fig2Result result;
  std::uint64_t cell_index = 0;
  for (const double eps : spec.eps_list) {
    for (const double fp : spec.fp_list) {
      const ForwardSchedule sched = spec.make_schedule(eps);
      auto features = spec.make_features(sched);
      const int sample_count =
          std::max(1, static_cast<int>(std::lround(features->count() / fp)));
      EnsembleSpec es{sched,
                      spec.data,
                      LinearEstimatorSpec{features, sample_count, spec.fit},
                      spec.sampler,
                      spec.n_models,
                      derive_seed(spec.seed, stream::kProbe, cell_index),
                      spec.hist,
                      spec.t_ref};
      es.lambda = spec.lambda;
      const EnsembleResult er = run_ensemble(es, threads);
      result.cells.push_back(Fig2Cell{eps, fp, sample_count, features->count(),
                                      er.metrics, er.hist});
      ++cell_index;
    }
  }
  if (spec.exact_reference) {
    const ForwardSchedule sched = spec.make_schedule(spec.eps_list.front());
    EnsembleSpec es{sched,
                    spec.data,
                    ExactScoreSpec{},
                    spec.sampler,
                    1,
                    derive_seed(spec.seed, stream::kProbe, cell_index),
                    spec.hist,
                    spec.t_ref};
    EnsembleSpec es_full = es;
    es_full.sampler.n_traj = spec.sampler.n_traj * std::max(1, spec.n_models / 4);
    const EnsembleResult er = run_ensemble(es_full, threads);
    result.exact = Fig2Cell{spec.eps_list.front(), 0.0, 0, 0, er.metrics, er.hist};
  }
  return result;
}

inline void write_fig2(const Fig2Result& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  CsvWriter summary(dir / "summary.csv");
  summary.header({"eps", "fp_ratio", "sample_count", "feature_count", "boundary_mass",
                  "kl_memorization"});
  for (std::size_t i = 0; i < result.cells.size(); ++i) {
    const Fig2Cell& c = result.cells[i];
    summary.row({c.eps, c.fp_ratio, static_cast<double>(c.sample_count),
                 static_cast<double>(c.feature_count), c.metrics.boundary_mass,
                 c.metrics.kl_memorization});
    write_histogram_csv(c.hist, dir / ("hist_cell" + std::to_string(i) + ".csv"));
  }
  if (result.exact)
    write_histogram_csv(result.exact->hist, dir / "hist_exact.csv");
}

// ---------------------------------------------------------------------------
// Feature/orientation conditions on the 2-D square-vertex preset.

struct Fig3Spec {
  ForwardSchedule sched;
  double square_half = 1.0;    // axis-aligned vertices (+-a, +-a)
  double rotation_deg = 45.0;
  std::function<std::shared_ptr<const FeatureSet>(const ForwardSchedule&)> gaussian_features;
  std::function<std::shared_ptr<const FeatureSet>(const ForwardSchedule&)> fourier_features;
  double fp_ratio = 0.5;
  LinearFitOptions fit;
  SamplerSpec sampler;
  int n_models = 100;
  std::uint64_t seed = 0;
  HistSpec hist;
  double t_ref = 0.4;
  WeightFn lambda = unit_weight();
  double corridor_radius = 0.3;
  double vertex_radius = 0.4;
};

struct EdgeMass {
  int a = 0;
  int b = 0;
  double mass_fraction = 0.0;
};

struct Fig3ConditionResult {
  std::string feature_kind;
  bool rotated = false;
  MixtureData data;
  HistogramGrid hist;
  std::vector<EdgeMass> edge_mass;     // all vertex pairs, input order
  std::vector<int> top_edges;          // indices of the top-2 pairs by mass
  std::vector<Vec> mode_centers;       // centers of the top-4 mass bins
  double side_mass = 0.0;              // mean corridor mass over the 4 sides
  double diagonal_mass = 0.0;          // mean over the 2 diagonals
  // "square" when the side corridors dominate, "cross" when the diagonals
  // through the centroid do
  std::string shape;
};

struct Fig3Result {
  std::vector<Fig3ConditionResult> conditions;
};

inline Mat square_vertices(double half, double rotation_deg) {
  Mat pts(4, 2);
  pts << half, half, -half, half, -half, -half, half, -half;
  const double a = rotation_deg * std::numbers::pi / 180.0;
  Mat rot(2, 2);
  rot << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
  return pts * rot.transpose();
}

inline double point_segment_distance(const Vec& p, const Vec& a, const Vec& b) {
  const Vec ab = b - a;
  const double denom = ab.squaredNorm();
  const double u = denom > 0.0 ? std::clamp((p - a).dot(ab) / denom, 0.0, 1.0) : 0.0;
  return (p - (a + u * ab)).norm();
}

// Gap mass per vertex pair: histogram mass in the corridor around the open
// segment, excluding the vertex neighborhoods.
inline std::vector<EdgeMass> edge_mass_table(const HistogramGrid& hist, const Mat& vertices,
                                             double corridor_radius, double vertex_radius) {
  std::vector<EdgeMass> edges;
  for (int a = 0; a < vertices.rows(); ++a)
    for (int b = a + 1; b < vertices.rows(); ++b) edges.push_back(EdgeMass{a, b, 0.0});
  double total = 0.0;
  for (std::size_t flat = 0; flat < hist.bin_count(); ++flat) {
    const double m = hist.mass(flat);
    if (m == 0.0) continue;
    const Vec c = hist.center(flat);
    for (EdgeMass& e : edges) {
      const Vec va = vertices.row(e.a).transpose();
      const Vec vb = vertices.row(e.b).transpose();
      if (point_segment_distance(c, va, vb) < corridor_radius &&
          (c - va).norm() > vertex_radius && (c - vb).norm() > vertex_radius) {
        e.mass_fraction += m;
        total += m;
      }
    }
  }
  if (total > 0.0)
    for (EdgeMass& e : edges) e.mass_fraction /= total;
  return edges;
}

inline Fig3Result run_fig3(const Fig3Spec& spec, int threads = 1) {
  Fig3Result result;
  std::uint64_t condition_index = 0;
  for (const std::string& kind : {std::string("gaussian"), std::string("fourier")}) {
    for (const bool rotated : {false, true}) {
      const Mat vertices =
          square_vertices(spec.square_half, rotated ? spec.rotation_deg : 0.0);
      const MixtureData data(vertices);
      auto features = kind == "gaussian" ? spec.gaussian_features(spec.sched)
                                         : spec.fourier_features(spec.sched);
      const int sample_count =
          std::max(1, static_cast<int>(std::lround(features->count() / spec.fp_ratio)));
      EnsembleSpec es{spec.sched,
                      data,
                      LinearEstimatorSpec{features, sample_count, spec.fit},
                      spec.sampler,
                      spec.n_models,
                      derive_seed(spec.seed, stream::kProbe, condition_index),
                      spec.hist,
                      spec.t_ref};
      es.lambda = spec.lambda;
      const EnsembleResult er = run_ensemble(es, threads);

      Fig3ConditionResult cond{kind, rotated, data, er.hist, {}, {}, {}, 0.0, 0.0, {}};
      cond.edge_mass =
          edge_mass_table(er.hist, vertices, spec.corridor_radius, spec.vertex_radius);
      std::vector<int> order(cond.edge_mass.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
      std::sort(order.begin(), order.end(), [&](int l, int r) {
        return cond.edge_mass[static_cast<std::size_t>(l)].mass_fraction >
               cond.edge_mass[static_cast<std::size_t>(r)].mass_fraction;
      });
      cond.top_edges.assign(order.begin(), order.begin() + 2);
      std::sort(cond.top_edges.begin(), cond.top_edges.end());

      // sides vs diagonals: diagonals are the strictly longer vertex pairs
      double min_len = std::numeric_limits<double>::infinity();
      for (const EdgeMass& e : cond.edge_mass)
        min_len = std::min(min_len,
                           (vertices.row(e.a) - vertices.row(e.b)).norm());
      int n_side = 0, n_diag = 0;
      for (const EdgeMass& e : cond.edge_mass) {
        const double len = (vertices.row(e.a) - vertices.row(e.b)).norm();
        if (len > 1.01 * min_len) {
          cond.diagonal_mass += e.mass_fraction;
          ++n_diag;
        } else {
          cond.side_mass += e.mass_fraction;
          ++n_side;
        }
      }
      if (n_side) cond.side_mass /= n_side;
      if (n_diag) cond.diagonal_mass /= n_diag;
      cond.shape = cond.side_mass >= cond.diagonal_mass ? "square" : "cross";

      // top-4 modes with non-maximum suppression, so adjacent bins of one
      // peak count as a single mode
      std::vector<std::size_t> bins(er.hist.bin_count());
      for (std::size_t i = 0; i < bins.size(); ++i) bins[i] = i;
      std::sort(bins.begin(), bins.end(), [&](std::size_t l, std::size_t r) {
        return er.hist.mass(l) > er.hist.mass(r);
      });
      const double separation = 0.3 * (vertices.row(0) - vertices.row(1)).norm();
      for (std::size_t i = 0; i < bins.size() && cond.mode_centers.size() < 4; ++i) {
        const Vec center = er.hist.center(bins[i]);
        bool distinct = true;
        for (const Vec& mode : cond.mode_centers)
          distinct = distinct && (center - mode).norm() >= separation;
        if (distinct) cond.mode_centers.push_back(center);
      }
      result.conditions.push_back(std::move(cond));
      ++condition_index;
    }
  }
  return result;
}

inline void write_fig3(const Fig3Result& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  CsvWriter table(dir / "edge_mass.csv");
  table.header({"features_gaussian", "rotated", "edge_a", "edge_b", "mass_fraction",
                "top_edge"});
  CsvWriter shapes(dir / "shape_classification.csv");
  shapes.header({"features_gaussian", "rotated", "side_mass", "diagonal_mass",
                 "shape_cross"});
  for (const Fig3ConditionResult& cond : result.conditions) {
    const std::string tag =
        cond.feature_kind + (cond.rotated ? "_rotated" : "_axis");
    shapes.row({cond.feature_kind == "gaussian" ? 1.0 : 0.0, cond.rotated ? 1.0 : 0.0,
                cond.side_mass, cond.diagonal_mass,
                cond.shape == "cross" ? 1.0 : 0.0});
    write_histogram_csv(cond.hist, dir / ("hist_" + tag + ".csv"));
    Mat heat(cond.hist.bins()[1], cond.hist.bins()[0]);
    for (std::size_t flat = 0; flat < cond.hist.bin_count(); ++flat) {
      const std::vector<int> idx = cond.hist.unflatten(flat);
      heat(idx[1], idx[0]) = cond.hist.mass(flat);
    }
    write_pgm(dir / ("heatmap_" + tag + ".pgm"), heat);
    for (std::size_t e = 0; e < cond.edge_mass.size(); ++e) {
      const EdgeMass& em = cond.edge_mass[e];
      const bool top = std::find(cond.top_edges.begin(), cond.top_edges.end(),
                                 static_cast<int>(e)) != cond.top_edges.end();
      table.row({cond.feature_kind == "gaussian" ? 1.0 : 0.0,
                 cond.rotated ? 1.0 : 0.0, static_cast<double>(em.a),
                 static_cast<double>(em.b), em.mass_fraction, top ? 1.0 : 0.0});
    }
  }
}

}  // namespace difflab
