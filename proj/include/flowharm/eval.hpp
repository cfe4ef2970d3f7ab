#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowharm/data.hpp"
#include "flowharm/nn.hpp"

namespace flowharm::eval {

enum class Task { AgeRegression, BinaryClassification };

std::string to_string(Task t);
Task parse_task(const std::string& s);

struct MlpConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double learning_rate = 0.1;
  double momentum = 0.9;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
};

// d -> d/2 -> d/4 -> 1 (145 -> 72 -> 36 -> 1).
std::vector<std::size_t> mlp_widths(std::size_t d);

/// Linear + LeakyReLU(0.1) ladder with a single linear output. Inputs are
/// z-scored with the training statistics stored in the model.
class Mlp {
 public:
  Mlp(std::size_t d, Task task, std::mt19937_64& rng);

  num::Tensor forward(const num::Tensor& z) const;
  // Regression: predicted value. Classification: probability of class 1.
  std::vector<double> predict(std::span<const double> x, std::size_t rows) const;

  Task task() const { return task_; }
  std::size_t dim() const { return dim_; }
  std::vector<nn::NamedParam> named_parameters() const;

  std::vector<double> x_mean, x_std;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;

 private:
  std::size_t dim_;
  Task task_;
  std::vector<nn::Linear> layers_;
};

// x is row-major [n, d]; labels are ages or 0/1.
Mlp train_mlp(std::span<const double> x, std::size_t d, std::span<const double> labels, Task task,
              const MlpConfig& cfg);

double mean_absolute_error(std::span<const double> pred, std::span<const double> labels);
// Fraction of rows where (prob >= 0.5) equals the label.
double accuracy(std::span<const double> prob, std::span<const double> labels);
double evaluate(const Mlp& m, std::span<const double> x, std::span<const double> labels);

struct Variant {
  std::string name;  // raw | combat | scm-affine | scm-lspline | scm-qspline
  data::DataTable table;
};

struct Plan {
  Task task = Task::AgeRegression;
  std::vector<std::size_t> source_sites, target_sites;
  std::size_t folds = 5;
  std::uint64_t seed = 0;
  std::size_t threads = 1;  // 0: all hardware threads
  MlpConfig mlp;
};

struct Cell {
  std::string variant;
  std::string mode;  // SrcOnly (trained on source rows) or TarOnly
  std::string role;  // Source or Target
  std::string study; // site label of the evaluated rows
  std::size_t fold = 0;
  double metric = 0.0;
  std::size_t train_rows = 0, test_rows = 0;
};

struct Summary {
  std::string variant, mode, role, study;
  double mean = 0.0, stddev = 0.0;
  std::size_t folds = 0;
  bool suspicious = false;  // Target metric beats TarOnly by more than 2 std
};

struct Report {
  Task task = Task::AgeRegression;
  std::string metric;  // mae | accuracy
  std::vector<std::size_t> source_sites, target_sites;
  std::vector<Cell> cells;
  std::vector<Summary> summary;

  const Summary* find(const std::string& variant, const std::string& mode, const std::string& role,
                      const std::string& study) const;
  std::vector<double> fold_metrics(const std::string& variant, const std::string& mode, const std::string& role,
                                   const std::string& study) const;
};

// Fold of every raw row as used by run_plan; kNoFold for rows outside the
// source and target sites.
inline constexpr std::size_t kNoFold = static_cast<std::size_t>(-1);
std::vector<std::size_t> assign_folds(const Plan& plan, const data::DataTable& raw);

// Folds are drawn once per site group. For every variant the MLP is trained
// on the source rows outside the fold and scored on the fold rows of the
// source group and of every target site; TarOnly trains on the raw target
// rows outside the fold. `labels` is aligned with `raw`, the reference table
// that defines subject ids and acquisition sites; variants are joined to it
// by subject id.
Report run_plan(const Plan& plan, const data::DataTable& raw, std::span<const double> labels,
                const std::vector<Variant>& variants);

std::string site_label(const std::vector<std::size_t>& sites);
std::string report_csv(const Report& r);
std::string report_json(const Report& r);

}  // namespace flowharm::eval
