/**
 * Dataset export: walk an image directory, run the backbone, and write one
 * RAIDEMB1 file per image plus a manifest.csv.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { Backbone, parseBackboneId, snapResolution } from "./backbone";
import { encodeEmbeddingSet } from "./format";
import { loadImage, resizeBilinear } from "./image";

export interface ExportOptions {
  imagesDir: string;
  outDir: string;
  resize: number;
  backboneId: string;
  weightsFile?: string;
  labelsFromDirname: boolean;
}

export interface ManifestRow {
  sourcePath: string;
  imageId: string;
  classLabel: string;
  outputPath: string;
  dim: number;
  gridHeight: number;
  gridWidth: number;
}

const IMAGE_EXTENSIONS = new Set([".png", ".ppm", ".pgm"]);

function listImages(dir: string): string[] {
  const found: string[] = [];
  const walk = (current: string) => {
    for (const entry of fs.readdirSync(current, { withFileTypes: true }).sort((a, b) =>
      a.name.localeCompare(b.name)
    )) {
      const full = path.join(current, entry.name);
      if (entry.isDirectory()) {
        walk(full);
      } else if (IMAGE_EXTENSIONS.has(path.extname(entry.name).toLowerCase())) {
        found.push(full);
      }
    }
  };
  walk(dir);
  return found;
}

function atomicWrite(target: string, data: Buffer | string): void {
  const tmp = target + ".tmp";
  fs.writeFileSync(tmp, data);
  fs.renameSync(tmp, target);
}

export function exportDataset(options: ExportOptions): ManifestRow[] {
  const config = parseBackboneId(options.backboneId);
  const backbone = new Backbone(config, options.weightsFile);
  const resolution = snapResolution(options.resize, config.patchSize);
  if (resolution !== options.resize) {
    console.error(
      `resize ${options.resize} snapped to ${resolution} (patch size ${config.patchSize})`
    );
  }

  const files = listImages(options.imagesDir);
  if (files.length === 0) {
    throw new Error(`no images under ${options.imagesDir}`);
  }
  fs.mkdirSync(options.outDir, { recursive: true });

  const manifest: ManifestRow[] = [];
  for (const file of files) {
    let row: ManifestRow;
    try {
      row = exportOne(file, backbone, resolution, options);
    } catch (error) {
      console.error(`skipping unreadable image ${file}: ${error}`);
      continue;
    }
    manifest.push(row);
  }

  const lines = ["source_path,image_id,class_label,output_path,dim,grid_height,grid_width"];
  for (const row of manifest) {
    lines.push(
      [
        row.sourcePath,
        row.imageId,
        row.classLabel,
        row.outputPath,
        row.dim,
        row.gridHeight,
        row.gridWidth,
      ].join(",")
    );
  }
  atomicWrite(path.join(options.outDir, "manifest.csv"), lines.join("\n") + "\n");
  return manifest;
}

function exportOne(
  file: string,
  backbone: Backbone,
  resolution: number,
  options: ExportOptions
): ManifestRow {
  const image = loadImage(file);
  const resized = resizeBilinear(image, resolution, resolution);
  const tokens = backbone.forward(resized);
  const imageId = path.basename(file).replace(/\.[^.]+$/, "");
  const classLabel = options.labelsFromDirname ? path.basename(path.dirname(file)) : "";
  const outputPath = path.join(options.outDir, `${imageId}.emb`);
  const payload = encodeEmbeddingSet({
    imageId,
    clsToken: tokens.cls,
    patchTokens: tokens.patches,
    gridHeight: tokens.gridHeight,
    gridWidth: tokens.gridWidth,
    dim: backbone.config.dim,
    sourceHeight: resolution,
    sourceWidth: resolution,
    classLabel: classLabel || undefined,
  });
  atomicWrite(outputPath, payload);
  return {
    sourcePath: file,
    imageId,
    classLabel,
    outputPath,
    dim: backbone.config.dim,
    gridHeight: tokens.gridHeight,
    gridWidth: tokens.gridWidth,
  };
}
