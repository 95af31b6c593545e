#!/usr/bin/env node
/**
 * export --images DIR --out DIR [--resize 256]
 *        [--backbone seeded-vit-p16-d64-l2-h4] [--weights FILE]
 *        [--labels-from-dirname]
 */

import { exportDataset } from "./export";

function parseArgs(argv: string[]) {
  const options = {
    imagesDir: "",
    outDir: "",
    resize: 256,
    backboneId: "seeded-vit-p16-d64-l2-h4",
    weightsFile: undefined as string | undefined,
    labelsFromDirname: false,
  };
  for (let i = 0; i < argv.length; i++) {
    switch (argv[i]) {
      case "--images":
        options.imagesDir = argv[++i];
        break;
      case "--out":
        options.outDir = argv[++i];
        break;
      case "--resize":
        options.resize = parseInt(argv[++i], 10);
        break;
      case "--backbone":
        options.backboneId = argv[++i];
        break;
      case "--weights":
        options.weightsFile = argv[++i];
        break;
      case "--labels-from-dirname":
        options.labelsFromDirname = true;
        break;
      default:
        throw new Error(`unknown argument: ${argv[i]}`);
    }
  }
  if (!options.imagesDir || !options.outDir) {
    throw new Error("usage: export --images DIR --out DIR [--resize N] [--backbone ID]");
  }
  return options;
}

function main(): void {
  const argv = process.argv.slice(2);
  if (argv[0] !== "export") {
    console.error("usage: export --images DIR --out DIR [--resize N] [--backbone ID]");
    process.exit(2);
  }
  let manifest;
  try {
    manifest = exportDataset(parseArgs(argv.slice(1)));
  } catch (error) {
    console.error(String(error instanceof Error ? error.message : error));
    process.exit(1);
  }
  console.log(`exported ${manifest.length} images`);
}

main();
