#pragma once

#include <string>
#include <utility>
#include <vector>

#include "topotta/image.hpp"
#include "topotta/tensor.hpp"

namespace topotta {

// ---------------------------------------------------------------------------
// PGM (binary, P5, maxval 255)
// ---------------------------------------------------------------------------

// Clamps to [0,1] and rounds to 0..255.
void write_pgm(const std::string& path, const ImageF& img);
// 0 -> 0, nonzero -> 255.
void write_pgm_mask(const std::string& path, const BinaryMask& mask);

ImageF read_pgm(const std::string& path);          // bytes scaled by 1/maxval
BinaryMask read_pgm_mask(const std::string& path); // byte > 127 -> 1

// ---------------------------------------------------------------------------
// Tensor container
//
// Byte-exact layout, in order:
//   "TOPOTTA_TENSORS 1\n"                       magic + format version
//   "kind <word>\n"                             file kind, e.g. checkpoint
//   "meta <key> <value...>\n"                   zero or more; value is the
//                                               rest of the line, may contain
//                                               spaces
//   "tensor <name> f64 <offset> <ndim> <d0> ... <dn-1>\n"
//                                               one per tensor; offset is the
//                                               byte offset into the payload,
//                                               assigned sequentially
//   "payload <nbytes>\n"
//   "end\n"
//   <nbytes of raw little-endian IEEE-754 float64 data>
//
// Tensor names must be unique and contain no whitespace. Readers reject bad
// magic, unknown directives, duplicate names, offset/size mismatches and
// truncated payloads.
// ---------------------------------------------------------------------------

struct TensorFile {
    std::string kind;
    std::vector<std::pair<std::string, std::string>> meta;     // ordered
    std::vector<std::pair<std::string, Tensor>> tensors;       // ordered

    const Tensor* find(const std::string& name) const;
    const std::string* find_meta(const std::string& key) const;
};

void write_tensor_file(const std::string& path, const TensorFile& tf);
TensorFile read_tensor_file(const std::string& path);

}  // namespace topotta
