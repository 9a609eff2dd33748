#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace s2ip {

enum class TimestampKind { index, iso8601 };

// Multivariate series, T time steps by N channels, stored row-major.
// Immutable once constructed.
class SeriesFrame {
 public:
  SeriesFrame() = default;
  // Timestamps are integer indices or seconds since the Unix epoch.
  SeriesFrame(std::vector<std::int64_t> timestamps, std::vector<double> values, std::vector<std::string> channel_names,
              TimestampKind kind = TimestampKind::index);

  std::size_t length() const { return timestamps_.size(); }
  std::size_t channels() const { return channel_names_.size(); }
  TimestampKind timestamp_kind() const { return kind_; }

  const std::vector<std::int64_t>& timestamps() const { return timestamps_; }
  const std::vector<std::string>& channel_names() const { return channel_names_; }
  std::span<const double> values() const { return values_; }
  double at(std::size_t t, std::size_t channel) const { return values_[t * channels() + channel]; }
  std::vector<double> channel(std::size_t n) const;

  // Rows [begin, begin + count).
  SeriesFrame rows(std::size_t begin, std::size_t count) const;
  SeriesFrame with_values(std::vector<double> values) const;

  std::string format_timestamp(std::int64_t ts) const;

  bool operator==(const SeriesFrame&) const = default;

 private:
  std::vector<std::int64_t> timestamps_;
  std::vector<double> values_;
  std::vector<std::string> channel_names_;
  TimestampKind kind_ = TimestampKind::index;
};

enum class MissingPolicy { reject, forward_fill };

struct CsvSchema {
  MissingPolicy missing = MissingPolicy::reject;
  // When non-empty, only these value columns are kept, in this order.
  std::vector<std::string> columns;
};

// Header row, then `timestamp,v1,...,vN`. Timestamps are integers or ISO-8601
// (`YYYY-MM-DD[ T]hh:mm[:ss]`). Throws ParseError with the file line number on
// malformed rows and ValidationError on empty or non-monotonic input.
SeriesFrame load_csv(const std::string& path, const CsvSchema& schema = {});
SeriesFrame parse_csv(const std::string& text, const CsvSchema& schema = {});
void write_csv(const std::string& path, const SeriesFrame& frame);

std::optional<std::int64_t> parse_iso8601(const std::string& text);
std::string format_iso8601(std::int64_t epoch_seconds);

struct SplitSpec {
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  std::optional<double> few_shot_fraction;

  void validate() const;
};

struct WindowSpec {
  std::size_t lookback = 96;
  std::size_t horizon = 24;
  std::size_t stride = 1;

  void validate() const;
};

struct SplitResult {
  SeriesFrame train;
  SeriesFrame val;
  SeriesFrame test;
  std::vector<std::string> warnings;
};

// Val and test receive floor(fraction * T) rows; the remainder goes to train.
// When `window` is given, splits too short to hold one window are reported in
// `warnings`.
SplitResult chronological_split(const SeriesFrame& frame, const SplitSpec& spec,
                                const std::optional<WindowSpec>& window = std::nullopt);

// First floor(fraction * T) rows.
SeriesFrame few_shot_truncate(const SeriesFrame& train, double fraction);

struct Window {
  std::size_t channel = 0;
  std::size_t offset = 0;  // row of the first input step
  std::vector<double> input;
  std::vector<double> target;
};

// Count per channel for a series of `length` steps.
std::size_t window_count(std::size_t length, const WindowSpec& spec);

// Channel-major: all windows of channel 0, then channel 1, ...
std::vector<Window> windows(const SeriesFrame& frame, const WindowSpec& spec);

// Per-channel standardization with statistics from one frame (the train split).
class Standardizer {
 public:
  Standardizer() = default;
  static Standardizer fit(const SeriesFrame& frame);
  static Standardizer identity(std::size_t channels);

  SeriesFrame transform(const SeriesFrame& frame) const;
  double inverse(std::size_t channel, double value) const { return value * scale_[channel] + mean_[channel]; }
  double forward(std::size_t channel, double value) const { return (value - mean_[channel]) / scale_[channel]; }

  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& scale() const { return scale_; }

 private:
  std::vector<double> mean_;
  std::vector<double> scale_;
};

}  // namespace s2ip
