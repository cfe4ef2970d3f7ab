#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "flowharm/data.hpp"
#include "flowharm/flow.hpp"
#include "flowharm/spline.hpp"

namespace flowharm::scm {

enum class XFlowKind { Affine, LinearSpline, QuadraticSpline };

std::string to_string(XFlowKind k);
// Accepts affine|lspline|qspline and the long names.
XFlowKind parse_flow_kind(const std::string& s);

/// Structure of the model: s, a, t are roots and x has parents {s, a, t}.
struct ScmSpec {
  std::size_t sites = 2;
  std::size_t dim = 1;
  XFlowKind flow = XFlowKind::QuadraticSpline;
  std::size_t bins = 8;
  double tail_bound = 3.0;
  std::size_t hidden = 0;  // 0: default width for dim

  std::size_t context_dim() const { return 2 + sites; }
  std::size_t hidden_width() const;
};

/// Training-split statistics. Features are z-scored before f_X; age enters
/// the context standardized and f_A ends in exp(log_age_mean + log_age_std * .).
struct Standardization {
  std::vector<double> x_mean, x_std;
  double age_mean = 0.0, age_std = 1.0;
  double log_age_mean = 0.0, log_age_std = 1.0;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double learning_rate = 3e-4;
  double weight_decay = 1e-4;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
  // Called after every epoch with (epoch, train loss, validation log-likelihood).
  std::function<void(std::size_t, double, double)> on_epoch;
};

struct TrainingMetadata {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_log_likelihood = 0.0;
  std::size_t train_rows = 0, val_rows = 0;
  std::vector<double> epoch_loss;     // mean training NLL per epoch
  std::vector<double> epoch_val_ll;   // validation mean log-likelihood per epoch
  std::size_t missing_grad_warnings = 0;
};

/// Exogenous noise of one row. eps_x lives in the standardized feature space.
struct NoiseVector {
  int eps_s = 0;
  double eps_a = 0.0;
  std::size_t eps_t = 0;
  std::vector<double> eps_x;
};

/// do(target := value); only the site variable "t" can be intervened on.
struct Intervention {
  std::string target = "t";
  std::size_t value = 0;
};

struct LikelihoodReport {
  double mean = 0.0;  // mean per-row total over rows that were not flagged
  double mean_sex = 0.0, mean_age = 0.0, mean_site = 0.0, mean_x = 0.0;
  std::vector<double> per_row;        // NaN for flagged rows
  std::vector<std::size_t> flagged;   // rows outside the model's support
  std::size_t used = 0;
};

struct BatchCounterfactual {
  data::DataTable table;  // rows that succeeded, in input order
  std::vector<std::size_t> kept_rows;
  std::vector<std::size_t> failed_rows;
  std::vector<std::string> errors;
  double max_sample_spread = 0.0;
};

class ScmModel {
 public:
  ScmModel(ScmSpec spec, Standardization stats, std::uint64_t init_seed = 0);

  static ScmModel fit(const data::DataTable& data, const ScmSpec& spec, const TrainConfig& config);

  const ScmSpec& spec() const { return spec_; }
  const Standardization& stats() const { return stats_; }
  const TrainingMetadata& metadata() const { return meta_; }
  TrainingMetadata& metadata() { return meta_; }

  double sex_probability() const;            // p(s = 1)
  std::vector<double> site_probabilities() const;

  // Mean per-row log p(s) + log p(a) + log p(t) + log p(x | s, a, t).
  LikelihoodReport log_likelihood(const data::DataTable& data) const;

  NoiseVector abduct(const data::DataTable& data, std::size_t row) const;
  std::vector<NoiseVector> abduct_all(const data::DataTable& data) const;
  // Prediction from noise, with the site assignment optionally replaced.
  std::vector<double> predict(const NoiseVector& noise, const Intervention* iv = nullptr) const;
  std::vector<double> counterfactual(const data::DataTable& data, std::size_t row, const Intervention& iv,
                                     std::size_t mc_samples = 32) const;
  // All rows under the same intervention; rows with domain errors are skipped.
  BatchCounterfactual counterfactual_batch(const data::DataTable& data, const Intervention& iv,
                                           std::size_t mc_samples = 32) const;

  data::DataTable sample_observational(std::size_t n, std::uint64_t seed) const;

  // Conditional mean of x in the original feature units, for affine models.
  std::vector<double> affine_conditional_mean(int sex, double age, std::size_t site) const;

  void save(const std::string& path) const;
  static ScmModel load(const std::string& path);

  std::vector<nn::NamedParam> named_parameters() const;
  void check_table(const data::DataTable& data) const;

 private:
  num::Tensor context(std::span<const int> sex, std::span<const double> age, std::span<const std::size_t> site) const;
  num::Tensor standardize(const data::DataTable& data, std::span<const std::size_t> rows) const;
  // Per-row terms for a batch; used by training and evaluation.
  struct Terms {
    num::Tensor sex, age, site, x;
  };
  Terms terms(const data::DataTable& data, std::span<const std::size_t> rows) const;
  void validate_intervention(const Intervention& iv) const;

  ScmSpec spec_;
  Standardization stats_;
  TrainingMetadata meta_;
  std::shared_ptr<flows::Categorical> sex_, site_;
  std::shared_ptr<flows::ElementwiseSpline> age_spline_;
  flows::FlowPtr age_flow_;
  flows::FlowPtr x_flow_;
};

}  // namespace flowharm::scm
