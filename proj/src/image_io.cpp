#include "topotta/image_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");
static_assert(sizeof(double) == 8);

namespace topotta {

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    return f;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for reading: " + path);
    return f;
}

// Reads one whitespace-delimited PGM header token, skipping '#' comments.
std::string pgm_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {}
            continue;
        }
        if (!std::isspace(c)) {
            tok.push_back(static_cast<char>(c));
            while ((c = in.peek()) != EOF && !std::isspace(c)) tok.push_back(static_cast<char>(in.get()));
            return tok;
        }
    }
    throw std::runtime_error("pgm: truncated header");
}

void write_pgm_bytes(const std::string& path, int h, int w, const std::vector<std::uint8_t>& bytes) {
    if (h <= 0 || w <= 0 || bytes.size() != static_cast<std::size_t>(h) * w)
        throw std::invalid_argument("pgm: bad dimensions");
    auto f = open_out(path);
    f << "P5\n" << w << " " << h << "\n255\n";
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("pgm: write failed: " + path);
}

std::vector<std::uint8_t> read_pgm_bytes(const std::string& path, int& h, int& w, int& maxval) {
    auto f = open_in(path);
    if (pgm_token(f) != "P5") throw std::runtime_error("pgm: not a binary P5 file: " + path);
    w = std::stoi(pgm_token(f));
    h = std::stoi(pgm_token(f));
    maxval = std::stoi(pgm_token(f));
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw std::runtime_error("pgm: unsupported header in " + path);
    f.get();  // single whitespace after maxval
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(h) * w);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (f.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw std::runtime_error("pgm: truncated pixel data in " + path);
    return bytes;
}

}  // namespace

void write_pgm(const std::string& path, const ImageF& img) {
    std::vector<std::uint8_t> bytes(img.v.size());
    for (std::size_t i = 0; i < img.v.size(); ++i) {
        double x = img.v[i];
        x = x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x);
        bytes[i] = static_cast<std::uint8_t>(std::lround(x * 255.0));
    }
    write_pgm_bytes(path, img.h, img.w, bytes);
}

void write_pgm_mask(const std::string& path, const BinaryMask& mask) {
    std::vector<std::uint8_t> bytes(mask.v.size());
    for (std::size_t i = 0; i < mask.v.size(); ++i) bytes[i] = mask.v[i] ? 255 : 0;
    write_pgm_bytes(path, mask.h, mask.w, bytes);
}

ImageF read_pgm(const std::string& path) {
    int h, w, maxval;
    auto bytes = read_pgm_bytes(path, h, w, maxval);
    ImageF im(h, w);
    for (std::size_t i = 0; i < bytes.size(); ++i) im.v[i] = bytes[i] / static_cast<double>(maxval);
    return im;
}

BinaryMask read_pgm_mask(const std::string& path) {
    int h, w, maxval;
    auto bytes = read_pgm_bytes(path, h, w, maxval);
    BinaryMask m(h, w);
    for (std::size_t i = 0; i < bytes.size(); ++i) m.v[i] = bytes[i] > 127 ? 1 : 0;
    return m;
}

// ---------------------------------------------------------------------------
// Tensor container
// ---------------------------------------------------------------------------

const Tensor* TensorFile::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

const std::string* TensorFile::find_meta(const std::string& key) const {
    for (const auto& [k, v] : meta)
        if (k == key) return &v;
    return nullptr;
}

namespace {

bool plain_word(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
        if (std::isspace(static_cast<unsigned char>(c)) || c == '\0') return false;
    return true;
}

}  // namespace

void write_tensor_file(const std::string& path, const TensorFile& tf) {
    if (!plain_word(tf.kind)) throw std::invalid_argument("tensor file: kind must be a single word");
    for (std::size_t i = 0; i < tf.tensors.size(); ++i) {
        const std::string& name = tf.tensors[i].first;
        if (!plain_word(name)) throw std::invalid_argument("tensor file: bad tensor name '" + name + "'");
        if (!tf.tensors[i].second.defined())
            throw std::invalid_argument("tensor file: undefined tensor '" + name + "'");
        for (std::size_t j = 0; j < i; ++j)
            if (tf.tensors[j].first == name)
                throw std::invalid_argument("tensor file: duplicate tensor name '" + name + "'");
    }
    for (const auto& [k, v] : tf.meta) {
        if (!plain_word(k)) throw std::invalid_argument("tensor file: bad meta key '" + k + "'");
        if (v.find('\n') != std::string::npos)
            throw std::invalid_argument("tensor file: meta value may not contain newlines");
    }

    std::ostringstream head;
    head << "TOPOTTA_TENSORS 1\n";
    head << "kind " << tf.kind << "\n";
    for (const auto& [k, v] : tf.meta) head << "meta " << k << " " << v << "\n";
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tf.tensors) {
        head << "tensor " << name << " f64 " << offset << " " << t.shape().size();
        for (int d : t.shape()) head << " " << d;
        head << "\n";
        offset += static_cast<std::uint64_t>(t.numel()) * 8;
    }
    head << "payload " << offset << "\n";
    head << "end\n";

    auto f = open_out(path);
    const std::string h = head.str();
    f.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, t] : tf.tensors) {
        const auto& d = t.data();
        f.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * 8));
    }
    if (!f) throw std::runtime_error("tensor file: write failed: " + path);
}

TensorFile read_tensor_file(const std::string& path) {
    auto f = open_in(path);
    std::string line;

    auto bad = [&](const std::string& why) -> std::runtime_error {
        return std::runtime_error("tensor file '" + path + "': " + why);
    };

    if (!std::getline(f, line) || line != "TOPOTTA_TENSORS 1")
        throw bad("bad magic or unsupported version");

    TensorFile tf;
    struct Entry {
        std::string name;
        std::uint64_t offset;
        Shape shape;
    };
    std::vector<Entry> dir;
    std::uint64_t payload_bytes = 0;
    bool saw_kind = false, saw_payload = false, saw_end = false;

    while (std::getline(f, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "kind") {
            if (saw_kind) throw bad("duplicate kind line");
            ls >> tf.kind;
            if (tf.kind.empty()) throw bad("empty kind");
            saw_kind = true;
        } else if (tag == "meta") {
            std::string key;
            ls >> key;
            if (key.empty()) throw bad("meta line without key");
            std::string value;
            std::getline(ls, value);
            if (!value.empty() && value.front() == ' ') value.erase(0, 1);
            tf.meta.emplace_back(key, value);
        } else if (tag == "tensor") {
            Entry e;
            std::string dtype;
            std::size_t ndim = 0;
            ls >> e.name >> dtype >> e.offset >> ndim;
            if (!ls || e.name.empty()) throw bad("malformed tensor line: " + line);
            if (dtype != "f64") throw bad("unsupported dtype '" + dtype + "'");
            if (ndim == 0 || ndim > 8) throw bad("bad rank on tensor '" + e.name + "'");
            e.shape.resize(ndim);
            for (std::size_t i = 0; i < ndim; ++i) {
                ls >> e.shape[i];
                if (!ls || e.shape[i] <= 0) throw bad("bad shape on tensor '" + e.name + "'");
            }
            for (const auto& prev : dir)
                if (prev.name == e.name) throw bad("duplicate tensor name '" + e.name + "'");
            dir.push_back(std::move(e));
        } else if (tag == "payload") {
            ls >> payload_bytes;
            if (!ls) throw bad("malformed payload line");
            saw_payload = true;
        } else if (tag == "end") {
            saw_end = true;
            break;
        } else {
            throw bad("unknown directive '" + tag + "'");
        }
    }
    if (!saw_end) throw bad("header ended without end line");
    if (!saw_kind) throw bad("missing kind line");
    if (!saw_payload) throw bad("missing payload line");

    std::uint64_t expect = 0;
    for (const auto& e : dir) {
        if (e.offset != expect) throw bad("non-sequential offset on tensor '" + e.name + "'");
        expect += static_cast<std::uint64_t>(shape_numel(e.shape)) * 8;
    }
    if (expect != payload_bytes) throw bad("payload size disagrees with tensor directory");

    std::vector<char> payload(payload_bytes);
    f.read(payload.data(), static_cast<std::streamsize>(payload_bytes));
    if (f.gcount() != static_cast<std::streamsize>(payload_bytes)) throw bad("truncated payload");
    if (f.get() != EOF) throw bad("trailing bytes after payload");

    for (const auto& e : dir) {
        std::vector<double> vals(shape_numel(e.shape));
        std::memcpy(vals.data(), payload.data() + e.offset, vals.size() * 8);
        tf.tensors.emplace_back(e.name, Tensor::from_data(e.shape, std::move(vals)));
    }
    return tf;
}

}  // namespace topotta
