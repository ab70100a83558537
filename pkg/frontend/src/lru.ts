/** Byte-bounded LRU cache for task resources (datasets, snapshots). */

export interface CacheEntry {
  data: Uint8Array;
  contentHash: string;
}

/**
 * Maps resource name -> (bytes, content hash), evicting least recently used
 * entries so total stored bytes never exceed `capacityBytes`. An entry larger
 * than the whole capacity is never stored (callers get a fetch-through; the
 * bound is inviolable). Same eviction contract as the native worker's cache.
 */
export class LruCache {
  readonly capacityBytes: number;
  private entries = new Map<string, CacheEntry>(); // Map iterates in insertion order
  private total = 0;

  constructor(capacityBytes: number) {
    if (capacityBytes < 0) throw new RangeError('capacity must be >= 0');
    this.capacityBytes = capacityBytes;
  }

  get size(): number {
    return this.entries.size;
  }

  get totalBytes(): number {
    return this.total;
  }

  has(name: string): boolean {
    return this.entries.has(name);
  }

  get(name: string): CacheEntry | undefined {
    const entry = this.entries.get(name);
    if (entry === undefined) return undefined;
    this.entries.delete(name); // freshen: re-insert at the back
    this.entries.set(name, entry);
    return entry;
  }

  /**
   * Insert, evicting LRU entries until the bound holds. Returns false when
   * the item alone exceeds capacity and was not stored (any previous entry
   * under the same name is gone either way).
   */
  put(name: string, data: Uint8Array, contentHash: string): boolean {
    const old = this.entries.get(name);
    if (old !== undefined) {
      this.entries.delete(name);
      this.total -= old.data.length;
    }
    if (data.length > this.capacityBytes) return false;
    while (this.entries.size > 0 && this.total + data.length > this.capacityBytes) {
      const eldest = this.entries.keys().next().value as string;
      const evicted = this.entries.get(eldest)!;
      this.entries.delete(eldest);
      this.total -= evicted.data.length;
    }
    this.entries.set(name, { data, contentHash });
    this.total += data.length;
    return true;
  }

  clear(): void {
    this.entries.clear();
    this.total = 0;
  }

  namesLruOrder(): string[] {
    return [...this.entries.keys()];
  }
}
