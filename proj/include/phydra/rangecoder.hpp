#pragma once

#include <cstdint>
#include <vector>

#include "phydra/errors.hpp"

namespace phydra {

// 64/32-bit range coder with carry propagation through a pending-byte run.
// All frequency tables total exactly 2^16. Encoder and decoder perform the
// same range arithmetic, so the decoder consumes exactly the bytes the
// encoder emitted (init 5 bytes + one per renormalization shift, against
// the encoder's 1 leading + shifts + 4 flush bytes).
class RangeEncoder {
 public:
  static constexpr std::uint32_t kTotalBits = 16;
  static constexpr std::uint32_t kTotal = 1u << kTotalBits;

  void encode(std::uint32_t cum, std::uint32_t freq);
  void encode_raw_bit(int bit);
  // Elias gamma of (value + 1) in raw bits; lossless for any value >= 0.
  void encode_gamma(std::uint64_t value);
  std::vector<std::uint8_t> finish();

 private:
  void shift_low();
  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t pending_ = 1;  // cache byte plus a run of 0xFF bytes
  std::vector<std::uint8_t> bytes_;
  bool finished_ = false;
};

class RangeDecoder {
 public:
  RangeDecoder(const std::uint8_t* data, std::size_t size);

  // Cumulative-frequency target of the next symbol, in [0, 2^16).
  std::uint32_t decode_target();
  void consume(std::uint32_t cum, std::uint32_t freq);
  int decode_raw_bit();
  std::uint64_t decode_gamma();
  std::size_t consumed() const { return pos_; }

 private:
  std::uint8_t next_byte();
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint32_t cml_ = 0;  // code minus low
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

// Quantized symbol distribution over the integer support [-support, support]
// with folded tails. Every bucket has frequency >= 1 and the frequencies sum
// to exactly 2^16.
struct FreqTable {
  int support = 0;
  std::vector<std::uint32_t> freq;
  std::vector<std::uint32_t> cum;  // size freq.size() + 1, cum.back() == 2^16

  std::int64_t vmin() const { return -support; }
  std::int64_t vmax() const { return support; }
  // Bucket index with cum[i] <= target < cum[i+1].
  std::size_t find(std::uint32_t target) const;
};

// Tables are built from fixed rational approximations of the CDFs so the
// same (mu, sigma) yields byte-identical tables on every platform.
FreqTable build_gaussian_table(double mu, double sigma, int support,
                               double sigma_min = 0.11);
FreqTable build_logistic_table(double loc, double scale, int support,
                               double scale_min = 0.11);

// Value coding with a lossless escape: out-of-support values fold into the
// extreme bucket, followed by a gamma-coded overshoot.
void encode_value(RangeEncoder& enc, const FreqTable& table, std::int64_t v);
std::int64_t decode_value(RangeDecoder& dec, const FreqTable& table);

// Sequence helpers; tables[i] models values[i].
std::vector<std::uint8_t> encode_symbols(const std::vector<std::int64_t>& values,
                                         const std::vector<const FreqTable*>& tables);
std::vector<std::int64_t> decode_symbols(const std::uint8_t* data,
                                         std::size_t size, std::size_t expect,
                                         const std::vector<const FreqTable*>& tables,
                                         std::size_t* consumed = nullptr);

}  // namespace phydra
