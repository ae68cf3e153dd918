#pragma once

// On-disk dataset layout: one directory per sample inside a split directory,
// frames as binary PPM (lossless; palette values are exact u8/255 multiples so
// the float<->u8 round trip is the identity), annotations as one plain-text
// sidecar per sample. A split-level manifest pins the format version and the
// sample count so truncated datasets are rejected rather than partially read.

#include "vlseg/data.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace vlseg::io {

namespace fs = std::filesystem;

struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void write_ppm(const fs::path& path, const TensorF& image, int size) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DatasetError("cannot open for writing: " + path.string());
  f << "P6\n" << size << " " << size << "\n255\n";
  std::vector<unsigned char> buf(static_cast<size_t>(size) * size * 3);
  for (std::int64_t i = 0; i < image.size(); ++i) {
    float v = image.data[static_cast<size_t>(i)];
    buf[static_cast<size_t>(i)] =
        static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
  }
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw DatasetError("short write: " + path.string());
}

inline TensorF read_ppm(const fs::path& path, int expect_size) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DatasetError("cannot open frame file: " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255)
    throw DatasetError("bad PPM header in " + path.string());
  if (w != expect_size || h != expect_size)
    throw DatasetError("frame size mismatch in " + path.string());
  f.get();  // single whitespace after header
  std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size()))
    throw DatasetError("truncated frame file: " + path.string());
  TensorF img({w * h, 3});
  for (size_t i = 0; i < buf.size(); ++i)
    img.data[i] = static_cast<float>(buf[i]) / 255.0f;
  return img;
}

// Run-length encoding over the row-major mask, starting with the count of
// zeros and alternating.
inline std::string rle_encode(const BinMask& m) {
  std::ostringstream os;
  std::uint8_t cur = 0;
  std::int64_t run = 0;
  bool first = true;
  for (auto b : m.v) {
    if (b == cur) {
      ++run;
    } else {
      os << (first ? "" : " ") << run;
      first = false;
      cur = b;
      run = 1;
    }
  }
  os << (first ? "" : " ") << run;
  return os.str();
}

inline BinMask rle_decode(std::istringstream& is, int h, int w, const std::string& where) {
  BinMask m(h, w);
  std::int64_t total = static_cast<std::int64_t>(h) * w, at = 0, run = 0;
  std::uint8_t cur = 0;
  while (is >> run) {
    if (run < 0 || at + run > total) throw DatasetError("bad RLE run in " + where);
    for (std::int64_t i = 0; i < run; ++i) m.v[static_cast<size_t>(at++)] = cur;
    cur = 1 - cur;
  }
  if (at != total) throw DatasetError("RLE does not cover mask in " + where);
  return m;
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string ints_to_line(const std::vector<int>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
  return os.str();
}

}  // namespace detail

inline void write_sample(const fs::path& dir, const EpisodeSample& ep, int image_size) {
  fs::create_directories(dir);
  for (int t = 0; t < ep.num_frames(); ++t) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03d.ppm", t);
    write_ppm(dir / name, ep.frames[static_cast<size_t>(t)], image_size);
  }
  std::ofstream f(dir / "sample.txt");
  if (!f) throw DatasetError("cannot write annotation: " + (dir / "sample.txt").string());
  f << "vlseg-sample v1\n";
  f << "task " << task_name(ep.task) << "\n";
  f << "image_size " << image_size << "\n";
  f << "frames " << ep.num_frames() << "\n";
  f << "instruction " << ep.prompt.instruction << "\n";
  switch (ep.prompt.kind) {
    case PromptSpec::Kind::classes: {
      f << "condition classes";
      for (const auto& c : ep.prompt.class_names) f << " " << c;
      f << "\n";
      break;
    }
    case PromptSpec::Kind::sentence:
      f << "condition sentence " << ep.prompt.sentence << "\n";
      break;
    case PromptSpec::Kind::regions: {
      f << "condition regions " << ep.prompt.regions.size() << "\n";
      for (size_t i = 0; i < ep.prompt.regions.size(); ++i) {
        const Region& r = ep.prompt.regions[i];
        f << "region " << i << " ";
        if (r.kind == Region::Kind::box)
          f << "box " << detail::fmt(r.box[0]) << " " << detail::fmt(r.box[1]) << " "
            << detail::fmt(r.box[2]) << " " << detail::fmt(r.box[3]) << "\n";
        else if (r.kind == Region::Kind::point)
          f << "point " << detail::fmt(r.point[0]) << " " << detail::fmt(r.point[1]) << "\n";
        else
          f << "mask " << rle_encode(r.mask) << "\n";
      }
      break;
    }
  }
  f << "objects " << ep.num_objects() << "\n";
  f << "classes " << detail::ints_to_line(ep.gt_classes) << "\n";
  f << "shape_classes " << detail::ints_to_line(ep.gt_shape_classes) << "\n";
  f << "identities " << detail::ints_to_line(ep.gt_identities) << "\n";
  f << "gt_text " << ep.gt_text << "\n";
  for (int t = 0; t < ep.num_frames(); ++t)
    for (int i = 0; i < ep.num_objects(); ++i)
      f << "mask " << t << " " << i << " "
        << rle_encode(ep.gt_masks[static_cast<size_t>(t)][static_cast<size_t>(i)]) << "\n";
  f << "end\n";
  if (!f) throw DatasetError("short write: " + (dir / "sample.txt").string());
}

inline EpisodeSample read_sample(const fs::path& dir) {
  const std::string where = dir.string();
  std::ifstream f(dir / "sample.txt");
  if (!f) throw DatasetError("missing annotation in " + where);
  std::string line;
  auto next_line = [&](const char* what) {
    if (!std::getline(f, line)) throw DatasetError(std::string("truncated annotation (") +
                                                   what + ") in " + where);
    return line;
  };
  if (next_line("header") != "vlseg-sample v1")
    throw DatasetError("version mismatch or corrupt annotation in " + where);

  EpisodeSample ep;
  int image_size = 0, frames = 0, objects = 0;
  auto expect_key = [&](const std::string& ln, const std::string& key) {
    if (ln.rfind(key + " ", 0) != 0 && ln != key)
      throw DatasetError("expected '" + key + "' in " + where);
    return ln.size() > key.size() ? ln.substr(key.size() + 1) : std::string();
  };
  ep.task = task_from_name(expect_key(next_line("task"), "task"));
  image_size = std::stoi(expect_key(next_line("image_size"), "image_size"));
  frames = std::stoi(expect_key(next_line("frames"), "frames"));
  ep.prompt.instruction = expect_key(next_line("instruction"), "instruction");
  {
    std::string cond = expect_key(next_line("condition"), "condition");
    std::istringstream cs(cond);
    std::string kind;
    cs >> kind;
    if (kind == "classes") {
      ep.prompt.kind = PromptSpec::Kind::classes;
      std::string c;
      while (cs >> c) ep.prompt.class_names.push_back(c);
    } else if (kind == "sentence") {
      ep.prompt.kind = PromptSpec::Kind::sentence;
      std::string rest;
      std::getline(cs, rest);
      ep.prompt.sentence = rest.empty() ? "" : rest.substr(1);
    } else if (kind == "regions") {
      ep.prompt.kind = PromptSpec::Kind::regions;
      int k;
      cs >> k;
      for (int i = 0; i < k; ++i) {
        std::istringstream rs(next_line("region"));
        std::string word, rkind;
        int idx;
        rs >> word >> idx >> rkind;
        if (word != "region" || idx != i) throw DatasetError("bad region record in " + where);
        Region r;
        if (rkind == "box") {
          r.kind = Region::Kind::box;
          rs >> r.box[0] >> r.box[1] >> r.box[2] >> r.box[3];
        } else if (rkind == "point") {
          r.kind = Region::Kind::point;
          rs >> r.point[0] >> r.point[1];
        } else if (rkind == "mask") {
          r.kind = Region::Kind::mask;
          r.mask = rle_decode(rs, image_size, image_size, where);
        } else {
          throw DatasetError("unknown region kind '" + rkind + "' in " + where);
        }
        if (rs.bad()) throw DatasetError("bad region record in " + where);
        ep.prompt.regions.push_back(std::move(r));
      }
    } else {
      throw DatasetError("unknown condition kind '" + kind + "' in " + where);
    }
  }
  objects = std::stoi(expect_key(next_line("objects"), "objects"));
  auto parse_ints = [&](const std::string& s) {
    std::istringstream is(s);
    std::vector<int> v;
    int x;
    while (is >> x) v.push_back(x);
    return v;
  };
  ep.gt_classes = parse_ints(expect_key(next_line("classes"), "classes"));
  ep.gt_shape_classes = parse_ints(expect_key(next_line("shape_classes"), "shape_classes"));
  ep.gt_identities = parse_ints(expect_key(next_line("identities"), "identities"));
  ep.gt_text = expect_key(next_line("gt_text"), "gt_text");
  if (static_cast<int>(ep.gt_classes.size()) != objects ||
      static_cast<int>(ep.gt_shape_classes.size()) != objects ||
      static_cast<int>(ep.gt_identities.size()) != objects)
    throw DatasetError("object count mismatch in " + where);

  ep.gt_masks.assign(static_cast<size_t>(frames), {});
  for (auto& fm : ep.gt_masks) fm.assign(static_cast<size_t>(objects), BinMask());
  for (int k = 0; k < frames * objects; ++k) {
    std::istringstream ms(next_line("mask"));
    std::string word;
    int t, i;
    ms >> word >> t >> i;
    if (word != "mask" || t < 0 || t >= frames || i < 0 || i >= objects)
      throw DatasetError("bad mask record in " + where);
    ep.gt_masks[static_cast<size_t>(t)][static_cast<size_t>(i)] =
        rle_decode(ms, image_size, image_size, where);
  }
  if (next_line("end") != "end") throw DatasetError("missing end marker in " + where);

  for (int t = 0; t < frames; ++t) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03d.ppm", t);
    ep.frames.push_back(read_ppm(dir / name, image_size));
  }
  return ep;
}

inline fs::path sample_dir(const fs::path& root, int index) {
  char name[32];
  std::snprintf(name, sizeof(name), "ep_%06d", index);
  return root / name;
}

inline void write_dataset(const std::vector<EpisodeSample>& samples, const fs::path& root,
                          int image_size) {
  fs::create_directories(root);
  std::ofstream manifest(root / "dataset.txt");
  if (!manifest) throw DatasetError("cannot write manifest: " + (root / "dataset.txt").string());
  manifest << "vlseg-dataset v1\ncount " << samples.size() << "\n";
  for (size_t i = 0; i < samples.size(); ++i)
    write_sample(sample_dir(root, static_cast<int>(i)), samples[i], image_size);
}

inline std::vector<EpisodeSample> read_dataset(const fs::path& root) {
  std::ifstream manifest(root / "dataset.txt");
  if (!manifest) throw DatasetError("missing dataset manifest: " + (root / "dataset.txt").string());
  std::string header;
  std::getline(manifest, header);
  if (header != "vlseg-dataset v1")
    throw DatasetError("dataset version mismatch in " + root.string());
  std::string key;
  int count = -1;
  manifest >> key >> count;
  if (key != "count" || count < 0)
    throw DatasetError("corrupt dataset manifest in " + root.string());
  std::vector<EpisodeSample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    fs::path dir = sample_dir(root, i);
    if (!fs::exists(dir)) throw DatasetError("missing sample: " + dir.string());
    out.push_back(read_sample(dir));
  }
  return out;
}

}  // namespace vlseg::io
